//! Model specifications and the two network families: an attention classifier
//! (backbone, pyramid attention, batch-norm, flatten, fully-connected) and the CXR
//! composite that concatenates pooled main-branch features with two frozen
//! auxiliary probability vectors.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::attention::{AttentionConfig, PyramidAttention};
use super::densenet::{DenseNet, DenseNetConfig};
use super::layers::{global_avg_pool, no_grad, sigmoid, softmax_last, to_f64_rows, BatchNorm, Linear};
use super::params::{Builder, ParamStore, TensorData};
use super::{NnError, Result};
use crate::data::Label;
use crate::preprocess::NormalizedTensor;

pub const CHEXPERT_DIM: usize = 6;
pub const PNEUMONIA_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Three-class CT screening.
    Ct,
    /// Binary COVID-19 CXR screening with auxiliary features.
    Cxr,
    /// Six-disease CXR auxiliary task.
    Chexpert6,
    /// Binary pneumonia auxiliary task.
    Pneumonia2,
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Ct => 3,
            Task::Cxr => 1,
            Task::Chexpert6 => CHEXPERT_DIM,
            Task::Pneumonia2 => PNEUMONIA_DIM,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ct => "ct",
            Task::Cxr => "cxr",
            Task::Chexpert6 => "chexpert6",
            Task::Pneumonia2 => "pneumonia2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Densenet121,
    Densenet(DenseNetConfig),
}

impl Backbone {
    pub fn config(&self) -> DenseNetConfig {
        match self {
            Backbone::Densenet121 => DenseNetConfig::densenet121(),
            Backbone::Densenet(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// Independent per-output sigmoid (one-vs-all).
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Widths of the hidden fully-connected layers.
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub activation: OutputActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxSource {
    /// A trained classifier whose weights travel with the checkpoint.
    Network { spec: Box<ModelSpec> },
    /// Fixed vector, for hermetic tests and stubs.
    Constant { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxSpec {
    pub chexpert: AuxSource,
    pub pneumonia: AuxSource,
}

impl AuxSpec {
    pub fn constant() -> Self {
        Self {
            chexpert: AuxSource::Constant { values: vec![0.5; CHEXPERT_DIM] },
            pneumonia: AuxSource::Constant { values: vec![0.5; PNEUMONIA_DIM] },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub backbone: Backbone,
    pub attention: AttentionConfig,
    pub head: HeadSpec,
    /// Input (height, width).
    pub input_size: [usize; 2],
    pub pretrained_backbone: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<AuxSpec>,
}

impl ModelSpec {
    pub fn deep_ct_net() -> Self {
        Self {
            task: Task::Ct,
            backbone: Backbone::Densenet121,
            attention: AttentionConfig::default(),
            head: HeadSpec { hidden: vec![256], outputs: 3, activation: OutputActivation::Sigmoid },
            input_size: [256, 256],
            pretrained_backbone: true,
            aux: None,
        }
    }

    pub fn deep_cxr_net(aux: AuxSpec) -> Self {
        Self {
            task: Task::Cxr,
            head: HeadSpec { hidden: vec![256], outputs: 1, activation: OutputActivation::Sigmoid },
            aux: Some(aux),
            ..Self::deep_ct_net()
        }
    }

    /// Classifier for one of the auxiliary tasks, same architecture as the CT network.
    pub fn aux_network(task: Task) -> Self {
        Self {
            task,
            head: HeadSpec { hidden: vec![256], outputs: task.outputs(), activation: OutputActivation::Sigmoid },
            ..Self::deep_ct_net()
        }
    }

    /// Small randomly-initialized variant for CPU tests and smoke runs.
    pub fn tiny(task: Task, input: usize) -> Self {
        let aux = (task == Task::Cxr).then(AuxSpec::constant);
        Self {
            task,
            backbone: Backbone::Densenet(DenseNetConfig::tiny()),
            attention: AttentionConfig::default(),
            head: HeadSpec { hidden: vec![16], outputs: task.outputs(), activation: OutputActivation::Sigmoid },
            input_size: [input, input],
            pretrained_backbone: false,
            aux,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.config().out_channels()
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let c = self.backbone.config();
        (c.feature_size(self.input_size[0]), c.feature_size(self.input_size[1]))
    }

    /// Length of the vector entering the CXR fully-connected layers.
    pub fn concat_len(&self) -> usize {
        self.feature_channels() + CHEXPERT_DIM + PNEUMONIA_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.backbone.config();
        cfg.validate()?;
        self.attention.validate(cfg.out_channels())?;
        if self.head.outputs != self.task.outputs() {
            return Err(NnError::InvalidSpec(format!(
                "head width {} does not match task {} ({} outputs)",
                self.head.outputs,
                self.task.as_str(),
                self.task.outputs()
            )));
        }
        if self.head.hidden.contains(&0) {
            return Err(NnError::InvalidSpec("zero-width hidden layer".into()));
        }
        let (fh, fw) = self.feature_size();
        if fh == 0 || fw == 0 {
            return Err(NnError::InvalidSpec(format!("input {:?} too small for the backbone", self.input_size)));
        }
        match (self.task, &self.aux) {
            (Task::Cxr, None) => {
                return Err(NnError::MissingAuxCheckpoint("CXR model requires auxiliary extractors".into()))
            }
            (Task::Cxr, Some(aux)) => {
                if self.head.hidden.len() != 1 {
                    return Err(NnError::InvalidSpec("CXR head has exactly two fully-connected layers".into()));
                }
                if self.head.activation != OutputActivation::Sigmoid {
                    return Err(NnError::InvalidSpec("CXR output is a single sigmoid".into()));
                }
                check_aux(&aux.chexpert, Task::Chexpert6, self.input_size)?;
                check_aux(&aux.pneumonia, Task::Pneumonia2, self.input_size)?;
            }
            (_, Some(_)) => return Err(NnError::InvalidSpec("only CXR models take auxiliary extractors".into())),
            _ => {}
        }
        Ok(())
    }
}

fn check_aux(src: &AuxSource, task: Task, input: [usize; 2]) -> Result<()> {
    match src {
        AuxSource::Constant { values } if values.len() != task.outputs() => Err(NnError::ShapeMismatch(format!(
            "{} stub has {} values, expected {}",
            task.as_str(),
            values.len(),
            task.outputs()
        ))),
        AuxSource::Network { spec } => {
            if spec.task != task {
                return Err(NnError::VersionMismatch(format!(
                    "auxiliary slot {} holds a {} network",
                    task.as_str(),
                    spec.task.as_str()
                )));
            }
            if spec.input_size != input {
                return Err(NnError::ShapeMismatch(format!(
                    "auxiliary input {:?} differs from main input {input:?}",
                    spec.input_size
                )));
            }
            spec.validate()
        }
        _ => Ok(()),
    }
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    let dims = x.dims();
    let [h, w] = spec.input_size;
    if dims.len() != 4 || dims[1] != 3 || dims[2] != h || dims[3] != w || dims[0] == 0 {
        return Err(NnError::ShapeMismatch(format!("expected (B, 3, {h}, {w}) input, got {dims:?}")));
    }
    Ok(())
}

/// Backbone, pyramid attention, batch-norm, flatten, fully-connected layers.
#[derive(Debug, Clone)]
pub struct AttentionClassifier {
    spec: ModelSpec,
    store: ParamStore,
    backbone: DenseNet,
    attention: PyramidAttention,
    norm: BatchNorm,
    fcs: Vec<Linear>,
}

impl AttentionClassifier {
    pub fn new(spec: &ModelSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.task == Task::Cxr {
            return Err(NnError::InvalidSpec("use CxrNet for the CXR task".into()));
        }
        let b = Builder::new(dtype, seed);
        let cfg = spec.backbone.config();
        let c = cfg.out_channels();
        let backbone = DenseNet::new(&b.pp("backbone"), &cfg)?;
        let attention = PyramidAttention::new(&b.pp("attention"), c, &spec.attention)?;
        let h = b.pp("head");
        let norm = BatchNorm::new(&h.pp("norm"), c)?;
        let (fh, fw) = spec.feature_size();
        let mut width = c * fh * fw;
        let mut fcs = Vec::new();
        for (i, out) in spec.head.hidden.iter().chain(std::iter::once(&spec.head.outputs)).enumerate() {
            fcs.push(Linear::new(&h.pp(format!("fc{}", i + 1)), width, *out)?);
            width = *out;
        }
        Ok(Self { spec: spec.clone(), store: b.into_store(), backbone, attention, norm, fcs })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone_forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        check_input(&self.spec, x)?;
        self.backbone.forward(x, train)
    }

    pub fn attention_forward(&self, fm: &Tensor) -> Result<Tensor> {
        self.attention.forward(fm)
    }

    /// Attention output: the last spatially-resolved representation.
    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.attention.forward(&self.backbone_forward(x, train)?)
    }

    pub fn head(&self, fm: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.norm.forward(fm, train)?.flatten_from(1)?;
        let last = self.fcs.len() - 1;
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.head(&self.features(x, train)?, train)
    }

    pub fn probabilities(&self, logits: &Tensor) -> Result<Tensor> {
        match self.spec.head.activation {
            OutputActivation::Sigmoid => sigmoid(logits),
            OutputActivation::Softmax => softmax_last(logits),
        }
    }

    /// Copies torchvision-named DenseNet weights (`features.*`) from a safetensors file.
    pub fn load_backbone_weights(&self, path: &Path) -> Result<usize> {
        load_backbone_into(&self.store, path)
    }
}

fn load_backbone_into(store: &ParamStore, path: &Path) -> Result<usize> {
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    let mut n = 0;
    for (name, var) in store.params().iter().chain(store.buffers()) {
        let Some(key) = name.strip_prefix("backbone.") else { continue };
        let t = tensors
            .get(key)
            .ok_or_else(|| NnError::VersionMismatch(format!("{key} missing from {}", path.display())))?;
        if t.dims() != var.dims() {
            return Err(NnError::VersionMismatch(format!(
                "{key}: file shape {:?}, model shape {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(store.dtype())?)?;
        n += 1;
    }
    Ok(n)
}

/// Auxiliary feature source for the CXR network. Outputs are detached and clamped to [0, 1].
#[derive(Debug, Clone)]
pub enum AuxExtractor {
    Network(Box<AttentionClassifier>),
    Constant(Vec<f64>),
}

impl AuxExtractor {
    pub fn from_source(src: &AuxSource, dtype: DType, seed: u64) -> Result<Self> {
        Ok(match src {
            AuxSource::Constant { values } => AuxExtractor::Constant(values.clone()),
            AuxSource::Network { spec } => AuxExtractor::Network(Box::new(AttentionClassifier::new(spec, dtype, seed)?)),
        })
    }

    /// Loads a trained auxiliary classifier from a checkpoint file.
    pub fn from_checkpoint(path: &Path, task: Task) -> Result<Self> {
        if !path.exists() {
            return Err(NnError::MissingAuxCheckpoint(format!("{} ({})", path.display(), task.as_str())));
        }
        let ckpt = super::checkpoint::Checkpoint::load(path)?;
        if ckpt.model_spec.task != task {
            return Err(NnError::VersionMismatch(format!(
                "{} holds a {} model, expected {}",
                path.display(),
                ckpt.model_spec.task.as_str(),
                task.as_str()
            )));
        }
        match ckpt.into_model()? {
            Model::Classifier(c) => Ok(AuxExtractor::Network(Box::new(c))),
            Model::Cxr(_) => unreachable!("task checked above"),
        }
    }

    pub fn source(&self) -> AuxSource {
        match self {
            AuxExtractor::Network(n) => AuxSource::Network { spec: Box::new(n.spec().clone()) },
            AuxExtractor::Constant(v) => AuxSource::Constant { values: v.clone() },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AuxExtractor::Network(n) => n.spec().head.outputs,
            AuxExtractor::Constant(v) => v.len(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = match self {
            AuxExtractor::Network(n) => no_grad(|| n.probabilities(&n.logits(x, false)?))?,
            AuxExtractor::Constant(v) => {
                let b = x.dim(0)?;
                let row = Tensor::from_vec(v.clone(), (1, v.len()), x.device())?.to_dtype(x.dtype())?;
                row.broadcast_as((b, v.len()))?.contiguous()?
            }
        };
        Ok(p.detach().clamp(0.0, 1.0)?)
    }

    pub fn store(&self) -> Option<&ParamStore> {
        match self {
            AuxExtractor::Network(n) => Some(n.store()),
            AuxExtractor::Constant(_) => None,
        }
    }
}

/// Main branch (backbone, attention, global pooling) concatenated with the two
/// auxiliary vectors, then two fully-connected layers and a sigmoid.
#[derive(Debug, Clone)]
pub struct CxrNet {
    spec: ModelSpec,
    store: ParamStore,
    backbone: DenseNet,
    attention: PyramidAttention,
    fc1: Linear,
    fc2: Linear,
    chexpert: AuxExtractor,
    pneumonia: AuxExtractor,
}

impl CxrNet {
    /// Builds the network with auxiliary extractors created from the spec
    /// (network sources are randomly initialized).
    pub fn new(spec: &ModelSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let aux = spec.aux.as_ref().expect("validated");
        let chexpert = AuxExtractor::from_source(&aux.chexpert, dtype, seed.wrapping_add(0x9e37_79b9))?;
        let pneumonia = AuxExtractor::from_source(&aux.pneumonia, dtype, seed.wrapping_add(0x7f4a_7c15))?;
        Self::with_aux(spec, dtype, seed, chexpert, pneumonia)
    }

    pub fn with_aux(
        spec: &ModelSpec,
        dtype: DType,
        seed: u64,
        chexpert: AuxExtractor,
        pneumonia: AuxExtractor,
    ) -> Result<Self> {
        let mut spec = spec.clone();
        spec.aux = Some(AuxSpec { chexpert: chexpert.source(), pneumonia: pneumonia.source() });
        spec.validate()?;
        if spec.task != Task::Cxr {
            return Err(NnError::InvalidSpec("CxrNet requires the CXR task".into()));
        }
        let b = Builder::new(dtype, seed);
        let cfg = spec.backbone.config();
        let c = cfg.out_channels();
        let backbone = DenseNet::new(&b.pp("backbone"), &cfg)?;
        let attention = PyramidAttention::new(&b.pp("attention"), c, &spec.attention)?;
        let h = b.pp("head");
        let fc1 = Linear::new(&h.pp("fc1"), spec.concat_len(), spec.head.hidden[0])?;
        let fc2 = Linear::new(&h.pp("fc2"), spec.head.hidden[0], 1)?;
        Ok(Self { spec, store: b.into_store(), backbone, attention, fc1, fc2, chexpert, pneumonia })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn chexpert(&self) -> &AuxExtractor {
        &self.chexpert
    }

    pub fn pneumonia(&self) -> &AuxExtractor {
        &self.pneumonia
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        check_input(&self.spec, x)?;
        self.attention.forward(&self.backbone.forward(x, train)?)
    }

    /// Pooled main-branch features `(B, C)`.
    pub fn main_features(&self, fm: &Tensor) -> Result<Tensor> {
        Ok(global_avg_pool(fm)?.flatten_from(1)?)
    }

    pub fn aux_features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_input(&self.spec, x)?;
        Ok((self.chexpert.forward(x)?, self.pneumonia.forward(x)?))
    }

    /// `[main | chexpert | pneumonia]`, length `C + 6 + 2`.
    pub fn concat_features(&self, x: &Tensor, fm: &Tensor) -> Result<Tensor> {
        let main = self.main_features(fm)?;
        let (c, p) = self.aux_features(x)?;
        Ok(Tensor::cat(&[&main, &c.to_dtype(main.dtype())?, &p.to_dtype(main.dtype())?], 1)?)
    }

    pub fn head(&self, concat: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(concat)?.relu()?)
    }

    pub fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let fm = self.features(x, train)?;
        self.head(&self.concat_features(x, &fm)?)
    }

    /// Digest over both auxiliary parameter stores (empty string for stubs).
    pub fn frozen_digest(&self) -> Result<String> {
        let mut s = String::new();
        for a in [&self.chexpert, &self.pneumonia] {
            if let Some(st) = a.store() {
                s.push_str(&st.digest()?);
            }
            s.push(';');
        }
        Ok(s)
    }
}

/// One prediction row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Index of the largest probability.
    pub argmax: usize,
    /// Binary decision (`p >= 0.5`) for single-output models.
    pub y: Option<u8>,
}

impl Prediction {
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let argmax = argmax(&probabilities);
        let y = (probabilities.len() == 1).then(|| u8::from(probabilities[0] >= 0.5));
        Self { probabilities, argmax, y }
    }

    /// Predicted class for three-class CT models; for CXR, COVID-19 iff `y = 1`.
    pub fn label(&self, task: Task) -> Option<Label> {
        match task {
            Task::Ct => Label::from_index(self.argmax),
            Task::Cxr => Some(if self.y == Some(1) { Label::Covid19 } else { Label::Normal }),
            _ => None,
        }
    }

    /// Score for the COVID-19 class.
    pub fn covid_score(&self) -> f64 {
        self.probabilities[0]
    }
}

/// First index of the maximum; NaN never wins.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub enum Model {
    Classifier(AttentionClassifier),
    Cxr(CxrNet),
}

impl Model {
    pub fn new(spec: &ModelSpec, dtype: DType, seed: u64) -> Result<Self> {
        match spec.task {
            Task::Cxr => Ok(Model::Cxr(CxrNet::new(spec, dtype, seed)?)),
            _ => Ok(Model::Classifier(AttentionClassifier::new(spec, dtype, seed)?)),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Classifier(m) => m.spec(),
            Model::Cxr(m) => m.spec(),
        }
    }

    /// The trainable store.
    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Classifier(m) => m.store(),
            Model::Cxr(m) => m.store(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.store().dtype()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.store().params().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Model::Classifier(m) => m.features(x, train),
            Model::Cxr(m) => m.features(x, train),
        }
    }

    /// Pre-activation scores from an attention feature map. `x` is needed by the
    /// CXR auxiliary extractors.
    pub fn logits_from_features(&self, x: &Tensor, fm: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Model::Classifier(m) => m.head(fm, train),
            Model::Cxr(m) => m.head(&m.concat_features(x, fm)?),
        }
    }

    pub fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Model::Classifier(m) => m.logits(x, train),
            Model::Cxr(m) => m.logits(x, train),
        }
    }

    pub fn probabilities(&self, logits: &Tensor) -> Result<Tensor> {
        match self {
            Model::Classifier(m) => m.probabilities(logits),
            Model::Cxr(_) => sigmoid(logits),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.probabilities(&self.logits(x, train)?)
    }

    /// Stacks preprocessed images into a `(B, 3, H, W)` input tensor.
    pub fn input_tensor(&self, batch: &[NormalizedTensor]) -> Result<Tensor> {
        let [h, w] = self.spec().input_size;
        let mut data = Vec::with_capacity(batch.len() * 3 * h * w);
        for t in batch {
            if t.shape() != (h, w, 3) {
                return Err(NnError::ShapeMismatch(format!(
                    "image {:?} is {:?}, model expects ({h}, {w}, 3)",
                    t.source_id,
                    t.shape()
                )));
            }
            data.extend(t.to_chw());
        }
        Ok(Tensor::from_vec(data, (batch.len(), 3, h, w), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        let p = no_grad(|| self.forward(x, false))?;
        Ok(to_f64_rows(&p)?.into_iter().map(Prediction::from_probabilities).collect())
    }

    pub fn predict_images(&self, batch: &[NormalizedTensor]) -> Result<Vec<Prediction>> {
        self.predict(&self.input_tensor(batch)?)
    }

    /// Digest over the trainable store.
    pub fn weights_digest(&self) -> Result<String> {
        self.store().digest()
    }

    /// Digest over frozen auxiliary parameters (`None` for classifiers).
    pub fn frozen_digest(&self) -> Result<Option<String>> {
        match self {
            Model::Classifier(_) => Ok(None),
            Model::Cxr(m) => m.frozen_digest().map(Some),
        }
    }

    /// Every tensor, with auxiliary weights under `aux.chexpert.` / `aux.pneumonia.`.
    pub fn export_tensors(&self) -> Result<BTreeMap<String, TensorData>> {
        let mut out = self.store().export()?;
        if let Model::Cxr(m) = self {
            for (prefix, a) in [("aux.chexpert.", &m.chexpert), ("aux.pneumonia.", &m.pneumonia)] {
                if let Some(st) = a.store() {
                    for (k, v) in st.export()? {
                        out.insert(format!("{prefix}{k}"), v);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn import_tensors(&self, tensors: &BTreeMap<String, TensorData>) -> Result<()> {
        self.store().import("", tensors)?;
        if let Model::Cxr(m) = self {
            for (prefix, a) in [("aux.chexpert.", &m.chexpert), ("aux.pneumonia.", &m.pneumonia)] {
                if let Some(st) = a.store() {
                    st.import(prefix, tensors)?;
                }
            }
        }
        Ok(())
    }

    pub fn load_backbone_weights(&self, path: &Path) -> Result<usize> {
        load_backbone_into(self.store(), path)
    }
}
