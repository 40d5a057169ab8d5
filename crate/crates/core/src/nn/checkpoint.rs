//! Versioned checkpoint container.
//!
//! ```text
//! magic "CSCKPT\0\0" | u32 version | u32 len | JSON header (spec + meta)
//! u32 count | count x (u16 name_len | name | u8 dtype | u8 rank | rank x u64 | raw LE bytes)
//! 32-byte SHA-256 of everything above
//! ```
//! Tensors are written in sorted name order, so identical weights give identical files.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Model, ModelSpec};
use super::params::{dtype_code, dtype_from_code, TensorData};
use super::{NnError, Result};
use crate::preprocess::PreprocessConfig;

pub const MAGIC: &[u8; 8] = b"CSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Training progress at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    pub running_loss: f64,
    pub best_val_auc: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epochs_since_improvement: u64,
    /// Base seed; per-epoch and per-sample streams derive from it.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    /// SHA-256 of the serialized run configuration.
    pub config_hash: String,
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    #[serde(default)]
    pub train_state: Option<TrainState>,
    #[serde(default)]
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_spec: ModelSpec,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_spec: ModelSpec,
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Result<Self> {
        Ok(Self { model_spec: model.spec().clone(), meta, tensors: model.export_tensors()? })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { model_spec: self.model_spec.clone(), meta: self.meta.clone() })
            .map_err(|e| NnError::InvalidSpec(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(t.dtype)?);
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| NnError::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file or truncated header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        if version != FORMAT_VERSION {
            return Err(NnError::VersionMismatch(format!(
                "checkpoint format {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| NnError::CorruptCheckpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let dtype = dtype_from_code(r.u8()?)?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let n: usize = shape.iter().product();
            let data = r.take(n.checked_mul(width).ok_or_else(|| corrupt("tensor size overflow"))?)?.to_vec();
            tensors.insert(name, TensorData { dtype, shape, bytes: data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        Ok(Self { model_spec: header.model_spec, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Dtype of the stored weights (f32 when empty).
    pub fn dtype(&self) -> DType {
        self.tensors.values().next().map(|t| t.dtype).unwrap_or(DType::F32)
    }

    /// Rebuilds the model described by the header and fills in the stored weights.
    pub fn into_model(&self) -> Result<Model> {
        let model = Model::new(&self.model_spec, self.dtype(), 0)?;
        model.import_tensors(&self.tensors)?;
        Ok(model)
    }

    /// Loads weights into an existing model; the specs must agree.
    pub fn load_into(&self, model: &Model) -> Result<()> {
        self.check_spec(model.spec())?;
        model.import_tensors(&self.tensors)
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if &self.model_spec != spec {
            return Err(NnError::VersionMismatch(format!(
                "checkpoint holds a {} model with {} outputs; expected {} with {} outputs{}",
                self.model_spec.task.as_str(),
                self.model_spec.head.outputs,
                spec.task.as_str(),
                spec.head.outputs,
                if self.model_spec.task == spec.task { " (architecture differs)" } else { "" }
            )));
        }
        Ok(())
    }

    /// Tensors under a prefix, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, TensorData> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
