//! Named parameter storage with deterministic, seeded initialization.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{NnError, Result};

/// Raw little-endian tensor bytes, independent of any device.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let bytes = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => return Err(NnError::InvalidSpec(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self { dtype: t.dtype(), shape: t.dims().to_vec(), bytes })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let n: usize = self.shape.iter().product();
        let width = dtype_width(self.dtype)?;
        if self.bytes.len() != n * width {
            return Err(NnError::CorruptCheckpoint(format!(
                "tensor of shape {:?} has {} bytes",
                self.shape,
                self.bytes.len()
            )));
        }
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> =
                    self.bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.shape.clone(), device)?
            }
            _ => {
                let v: Vec<f64> =
                    self.bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.shape.clone(), device)?
            }
        };
        Ok(t)
    }
}

pub fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(NnError::InvalidSpec(format!("unsupported dtype {other:?}"))),
    }
}

pub fn dtype_from_code(code: u8) -> Result<DType> {
    match code {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        c => Err(NnError::CorruptCheckpoint(format!("unknown dtype code {c}"))),
    }
}

fn dtype_width(dtype: DType) -> Result<usize> {
    match dtype {
        DType::F32 => Ok(4),
        DType::F64 => Ok(8),
        other => Err(NnError::InvalidSpec(format!("unsupported dtype {other:?}"))),
    }
}

/// Trainable parameters plus non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { device: Device::Cpu, dtype, params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// All tensors (params and buffers) keyed by name, in sorted order.
    pub fn export(&self) -> Result<BTreeMap<String, TensorData>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            out.insert(k.clone(), TensorData::from_tensor(v.as_tensor())?);
        }
        Ok(out)
    }

    /// Overwrites every tensor from `tensors[prefix + name]`. All names must be present.
    pub fn import(&self, prefix: &str, tensors: &BTreeMap<String, TensorData>) -> Result<()> {
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            let key = format!("{prefix}{k}");
            let data = tensors
                .get(&key)
                .ok_or_else(|| NnError::VersionMismatch(format!("tensor {key} missing from checkpoint")))?;
            if data.shape != v.dims() {
                return Err(NnError::VersionMismatch(format!(
                    "tensor {key}: checkpoint shape {:?}, model shape {:?}",
                    data.shape,
                    v.dims()
                )));
            }
            let t = data.to_tensor(&self.device)?.to_dtype(self.dtype)?;
            v.set(&t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bytes of every tensor.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, d) in self.export()? {
            h.update(k.as_bytes());
            for s in &d.shape {
                h.update((*s as u64).to_le_bytes());
            }
            h.update(&d.bytes);
        }
        Ok(format!("{:x}", h.finalize()))
    }
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// He-normal with `std = sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    Uniform { bound: f64 },
}

struct Inner {
    store: ParamStore,
    rng: ChaCha8Rng,
}

/// Hierarchical name scope used while constructing a model.
#[derive(Clone)]
pub struct Builder {
    inner: Rc<RefCell<Inner>>,
    prefix: String,
}

impl Builder {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner { store: ParamStore::new(dtype), rng: ChaCha8Rng::seed_from_u64(seed) })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self { inner: self.inner.clone(), prefix }
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().store.dtype
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn make(&self, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let mut inner = self.inner.borrow_mut();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::KaimingNormal { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(&mut inner.rng)).collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| inner.rng.random_range(-bound..=bound)).collect(),
        };
        let dtype = inner.store.dtype;
        let t = Tensor::from_vec(values, shape.to_vec(), &inner.store.device)?.to_dtype(dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let var = self.make(shape, init)?;
        let key = self.path(name);
        let mut inner = self.inner.borrow_mut();
        if inner.store.params.insert(key.clone(), var.clone()).is_some() {
            return Err(NnError::InvalidSpec(format!("duplicate parameter {key}")));
        }
        Ok(var)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let var = self.make(shape, Init::Const(value))?;
        let key = self.path(name);
        self.inner.borrow_mut().store.buffers.insert(key, var.clone());
        Ok(var)
    }

    pub fn into_store(self) -> ParamStore {
        self.inner.borrow().store.clone()
    }
}
