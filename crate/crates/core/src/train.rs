//! Adam + binary cross-entropy training with deterministic data order,
//! epoch-boundary checkpoints, early stopping and divergence recovery.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, ImageRecord, Label, Split};
use crate::metrics::{roc_auc, MetricsError};
use crate::nn::{Checkpoint, CheckpointMeta, Model, NnError, TensorData, Task, TrainState};
use crate::preprocess::{run_pipeline, sample_rng, Mode, NormalizedTensor, PreprocessConfig, PreprocessError, RasterImage};

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the logarithm.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}, step {step}; weights restored to the start of the epoch")]
    DivergenceDetected { epoch: u64, step: u64, last_good: Box<Checkpoint> },
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Nn(NnError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub seed: u64,
    pub loss: LossKind,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: u64,
    /// Optional per-output loss weights (off by default).
    pub class_weights: Option<Vec<f64>>,
    /// Stop after this many optimizer steps (for smoke runs).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 50,
            seed: 0,
            loss: LossKind::Bce,
            early_stop_patience: 7,
            class_weights: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(TrainError::InvalidConfig("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(TrainError::InvalidConfig("class weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over all elements. Optional `weights` scale each output column.
pub fn bce_loss(probs: &Tensor, targets: &Tensor, weights: Option<&[f64]>) -> Result<Tensor> {
    if probs.dims() != targets.dims() {
        return Err(TrainError::ShapeMismatch(format!("probs {:?} vs targets {:?}", probs.dims(), targets.dims())));
    }
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let one_minus_y = targets.affine(-1.0, 1.0)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let ll = ((targets * p.log()?)? + (one_minus_y * one_minus_p.log()?)?)?.neg()?;
    let ll = match weights {
        Some(w) => {
            let k = *probs.dims().last().unwrap_or(&1);
            if w.len() != k {
                return Err(TrainError::ShapeMismatch(format!("{} class weights for {k} outputs", w.len())));
            }
            let wt = Tensor::from_vec(w.to_vec(), (1, k), probs.device())?.to_dtype(probs.dtype())?;
            ll.broadcast_mul(&wt)?
        }
        None => ll,
    };
    Ok(ll.mean_all()?)
}

/// Plain-slice BCE used by evaluation and tests.
pub fn bce_loss_values(probs: &[f64], targets: &[f64]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(TrainError::ShapeMismatch(format!("{} probs vs {} targets", probs.len(), targets.len())));
    }
    let s: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

/// Target vector for a label: one-hot for CT, `[is_covid]` for CXR.
pub fn target_for(task: Task, label: Label) -> Result<Vec<f64>> {
    match task {
        Task::Ct => {
            let mut v = vec![0.0; 3];
            v[label.index()] = 1.0;
            Ok(v)
        }
        Task::Cxr => Ok(vec![if label.is_covid() { 1.0 } else { 0.0 }]),
        t => Err(TrainError::InvalidConfig(format!(
            "the {} task is trained on its own external labels, not the three screening classes",
            t.as_str()
        ))),
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // moments must not hold on to the step's autograd graph
            let g = g.detach();
            let g = &g;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let (m, v) = (m.detach(), v.detach());
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    fn export(&self, out: &mut BTreeMap<String, TensorData>) -> Result<()> {
        for (k, t) in &self.m {
            out.insert(format!("optim.m.{k}"), TensorData::from_tensor(t)?);
        }
        for (k, t) in &self.v {
            out.insert(format!("optim.v.{k}"), TensorData::from_tensor(t)?);
        }
        Ok(())
    }

    fn import(&mut self, ckpt: &Checkpoint, t: u64, dtype: candle_core::DType) -> Result<()> {
        self.t = t;
        self.m.clear();
        self.v.clear();
        let dev = candle_core::Device::Cpu;
        for (k, d) in ckpt.section("optim.m.") {
            self.m.insert(k, d.to_tensor(&dev)?.to_dtype(dtype)?);
        }
        for (k, d) in ckpt.section("optim.v.") {
            self.v.insert(k, d.to_tensor(&dev)?.to_dtype(dtype)?);
        }
        Ok(())
    }
}

/// Indexed labelled images that can be preprocessed on demand.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, index: usize) -> Label;
    fn id(&self, index: usize) -> String;
    fn raster(&self, index: usize) -> Result<RasterImage>;
    fn preprocess_config(&self) -> &PreprocessConfig;

    fn load(&self, index: usize, mode: Mode, rng: &mut ChaCha8Rng) -> Result<NormalizedTensor> {
        let mut t = run_pipeline(&self.raster(index)?, mode, rng, self.preprocess_config())?;
        t.source_id = Some(self.id(index));
        Ok(t)
    }
}

/// Already-decoded images, used by tests and synthetic tasks.
#[derive(Debug, Clone)]
pub struct InMemorySource {
    pub images: Vec<RasterImage>,
    pub labels: Vec<Label>,
    pub ids: Vec<String>,
    pub config: PreprocessConfig,
}

impl InMemorySource {
    pub fn new(images: Vec<RasterImage>, labels: Vec<Label>, config: PreprocessConfig) -> Self {
        let ids = (0..images.len()).map(|i| format!("img{i:05}")).collect();
        Self { images, labels, ids, config }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            config: self.config.clone(),
        }
    }
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn label(&self, index: usize) -> Label {
        self.labels[index]
    }
    fn id(&self, index: usize) -> String {
        self.ids[index].clone()
    }
    fn raster(&self, index: usize) -> Result<RasterImage> {
        Ok(self.images[index].clone())
    }
    fn preprocess_config(&self) -> &PreprocessConfig {
        &self.config
    }
}

/// Images of one manifest split, decoded from disk on every access.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    root: PathBuf,
    records: Vec<ImageRecord>,
    config: PreprocessConfig,
}

impl ManifestSource {
    pub fn new(manifest: &DatasetManifest, split: Split, config: PreprocessConfig) -> Self {
        Self {
            root: manifest.root.clone(),
            records: manifest.records_in(split).into_iter().cloned().collect(),
            config,
        }
    }

    /// Every record regardless of split (for external cross-dataset sets).
    pub fn all(manifest: &DatasetManifest, config: PreprocessConfig) -> Self {
        Self { root: manifest.root.clone(), records: manifest.records.clone(), config }
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.records.len()
    }
    fn label(&self, index: usize) -> Label {
        self.records[index].label
    }
    fn id(&self, index: usize) -> String {
        self.records[index].image_id.clone()
    }
    fn raster(&self, index: usize) -> Result<RasterImage> {
        let path = self.root.join(&self.records[index].path);
        RasterImage::open(&path).map_err(|e| match e {
            PreprocessError::Decode { .. } => TrainError::Data(DataError::UndecodableImage {
                path: path.clone(),
                message: e.to_string(),
            }),
            other => other.into(),
        })
    }
    fn preprocess_config(&self) -> &PreprocessConfig {
        &self.config
    }
}

/// Preprocesses `indices` in parallel; sample `i` always uses `sample_rng(seed, epoch, i)`.
pub fn load_batch(
    src: &dyn SampleSource,
    indices: &[usize],
    mode: Mode,
    seed: u64,
    epoch: u64,
) -> Result<Vec<NormalizedTensor>> {
    indices
        .par_iter()
        .map(|&i| src.load(i, mode, &mut sample_rng(seed, epoch, i as u64)))
        .collect()
}

/// Sample order for one epoch, seeded from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1) << 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Checkpoint of the best validation epoch (the last epoch when no validation ran).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub stopped_early: bool,
}

/// Validation summary used for model selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationStats {
    pub loss: f64,
    pub auc: Option<f64>,
    pub accuracy: f64,
}

pub fn is_correct(task: Task, probs: &[f64], label: Label) -> bool {
    let p = crate::nn::Prediction::from_probabilities(probs.to_vec());
    p.label(task) == Some(label) || (task == Task::Cxr && (p.y == Some(1)) == label.is_covid())
}

/// Eval-mode pass over a source: probabilities per sample in source order.
pub fn predict_source(model: &Model, src: &dyn SampleSource, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(src.len());
    let idx: Vec<usize> = (0..src.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = load_batch(src, chunk, Mode::Eval, 0, 0)?;
        for p in model.predict_images(&batch)? {
            out.push(p.probabilities);
        }
    }
    Ok(out)
}

pub fn validate_model(model: &Model, src: &dyn SampleSource, batch_size: usize) -> Result<ValidationStats> {
    if src.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let task = model.spec().task;
    let probs = predict_source(model, src, batch_size)?;
    let mut flat_p = Vec::new();
    let mut flat_t = Vec::new();
    let mut scores = Vec::new();
    let mut positive = Vec::new();
    let mut correct = 0;
    for (i, p) in probs.iter().enumerate() {
        let label = src.label(i);
        flat_p.extend_from_slice(p);
        flat_t.extend(target_for(task, label)?);
        scores.push(p[0]);
        positive.push(label.is_covid());
        correct += usize::from(is_correct(task, p, label));
    }
    let auc = match roc_auc(&scores, &positive) {
        Ok(r) => Some(r.auc),
        Err(MetricsError::SingleClassInput) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ValidationStats { loss: bce_loss_values(&flat_p, &flat_t)?, auc, accuracy: correct as f64 / probs.len() as f64 })
}

/// Owns the optimizer state and training progress for one model.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    optimizer: Adam,
    state: TrainState,
    best: Option<Checkpoint>,
    meta_template: CheckpointMeta,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        target_for(model.spec().task, Label::Covid19)?;
        let state = TrainState { seed: cfg.seed, ..Default::default() };
        Ok(Self { optimizer: Adam::new(&cfg), model, cfg, state, best: None, meta_template: CheckpointMeta::default() })
    }

    /// Continues from an epoch-boundary checkpoint. The model must match the checkpoint's spec.
    pub fn resume(model: Model, ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        ckpt.load_into(&model)?;
        let state = ckpt
            .meta
            .train_state
            .clone()
            .ok_or_else(|| TrainError::Nn(NnError::VersionMismatch("checkpoint carries no training state".into())))?;
        let mut t = Self::new(model, TrainConfig { seed: state.seed, ..cfg })?;
        t.optimizer.import(ckpt, state.step, t.model.dtype())?;
        t.state = state;
        t.meta_template = ckpt.meta.clone();
        Ok(t)
    }

    /// Extra metadata (preprocess config, config hash) stamped into every checkpoint.
    pub fn set_meta(&mut self, meta: CheckpointMeta) {
        self.meta_template = meta;
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Checkpoint of the best validation epoch so far.
    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    /// Epoch, step or patience budget used up.
    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.max_epochs
            || self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
            || (self.cfg.early_stop_patience > 0 && self.state.epochs_since_improvement >= self.cfg.early_stop_patience)
    }

    /// Current weights, optimizer moments and progress.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = self.meta_template.clone();
        meta.step = self.state.step;
        meta.seed = self.state.seed;
        meta.train_state = Some(self.state.clone());
        let mut ckpt = Checkpoint::from_model(&self.model, meta)?;
        self.optimizer.export(&mut ckpt.tensors)?;
        Ok(ckpt)
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.model.import_tensors(&ckpt.tensors)?;
        let state = ckpt.meta.train_state.clone().unwrap_or_default();
        self.optimizer.import(ckpt, state.step, self.model.dtype())?;
        self.state = state;
        Ok(())
    }

    /// One optimizer step on a prepared batch; returns the loss and the probabilities.
    pub fn train_step(&mut self, batch: &[NormalizedTensor], labels: &[Label]) -> Result<(f64, Vec<Vec<f64>>)> {
        let task = self.model.spec().task;
        let x = self.model.input_tensor(batch)?;
        let mut t = Vec::new();
        for l in labels {
            t.extend(target_for(task, *l)?);
        }
        let k = task.outputs();
        let targets = Tensor::from_vec(t, (labels.len(), k), x.device())?.to_dtype(x.dtype())?;
        let probs = self.model.forward(&x, true)?;
        let loss = bce_loss(&probs, &targets, self.cfg.class_weights.as_deref())?;
        let rows = crate::nn::layers::to_f64_rows(&probs)?;
        // the clamp inside the loss would hide NaN probabilities
        let value = if rows.iter().flatten().all(|p| p.is_finite()) {
            loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?
        } else {
            f64::NAN
        };
        if value.is_finite() {
            let grads = loss.backward()?;
            self.optimizer.step(&self.model.trainable(), &grads)?;
        }
        self.state.step += 1;
        Ok((value, rows))
    }

    /// Runs one epoch; on a non-finite loss restores the epoch-start state and fails.
    pub fn run_epoch(&mut self, train: &dyn SampleSource, val: Option<&dyn SampleSource>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let snapshot = self.checkpoint()?;
        let epoch = self.state.epoch;
        let order = epoch_order(train.len(), self.state.seed, epoch);
        let mut losses = Vec::new();
        let mut correct = 0usize;
        let mut seen = 0usize;
        let task = self.model.spec().task;
        for chunk in order.chunks(self.cfg.batch_size) {
            if self.cfg.max_steps.is_some_and(|m| self.state.step >= m) {
                break;
            }
            let batch = load_batch(train, chunk, Mode::Train, self.state.seed, epoch)?;
            let labels: Vec<Label> = chunk.iter().map(|&i| train.label(i)).collect();
            let (loss, probs) = self.train_step(&batch, &labels)?;
            if !loss.is_finite() {
                let step = self.state.step;
                self.restore(&snapshot)?;
                return Err(TrainError::DivergenceDetected { epoch: epoch + 1, step, last_good: Box::new(snapshot) });
            }
            losses.push(loss);
            for (p, l) in probs.iter().zip(&labels) {
                correct += usize::from(is_correct(task, p, *l));
            }
            seen += labels.len();
        }
        self.state.epoch += 1;
        let train_loss = if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        self.state.running_loss = train_loss;
        let v = match val {
            Some(v) if !v.is_empty() => Some(validate_model(&self.model, v, self.cfg.batch_size)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            train_loss,
            train_accuracy: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
            val_loss: v.map(|s| s.loss),
            val_auc: v.and_then(|s| s.auc),
            val_accuracy: v.map(|s| s.accuracy),
            step_losses: losses,
        };
        self.update_best(v)?;
        Ok(record)
    }

    /// Model selection on validation AUC, falling back to negative validation loss when AUC is undefined.
    fn update_best(&mut self, v: Option<ValidationStats>) -> Result<()> {
        let Some(v) = v else {
            self.best = Some(self.checkpoint()?);
            return Ok(());
        };
        let score = v.auc.unwrap_or(-v.loss);
        let improved = self.state.best_val_auc.is_none_or(|b| score > b);
        if improved {
            self.state.best_val_auc = Some(score);
            self.state.best_epoch = Some(self.state.epoch);
            self.state.epochs_since_improvement = 0;
            self.best = Some(self.checkpoint()?);
        } else {
            self.state.epochs_since_improvement += 1;
        }
        Ok(())
    }

    /// Trains until `max_epochs`, `max_steps` or early stopping.
    pub fn fit(&mut self, train: &dyn SampleSource, val: Option<&dyn SampleSource>) -> Result<TrainOutcome> {
        self.fit_with(train, val, |_| {})
    }

    pub fn fit_with(
        &mut self,
        train: &dyn SampleSource,
        val: Option<&dyn SampleSource>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut stopped_early = false;
        while self.state.epoch < self.cfg.max_epochs {
            if self.cfg.max_steps.is_some_and(|m| self.state.step >= m) {
                break;
            }
            let rec = self.run_epoch(train, val)?;
            tracing::info!(epoch = rec.epoch, loss = rec.train_loss, val_auc = ?rec.val_auc, "epoch finished");
            on_epoch(&rec);
            history.push(rec);
            if self.cfg.early_stop_patience > 0 && self.state.epochs_since_improvement >= self.cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
        let last = self.checkpoint()?;
        let best = self.best.clone().unwrap_or_else(|| last.clone());
        Ok(TrainOutcome { history, best, last, stopped_early })
    }
}

pub fn history_line(r: &EpochRecord) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    format!(
        "epoch {} step {} train_loss {:.6} train_acc {:.4} val_loss {} val_auc {} val_acc {}",
        r.epoch,
        r.step,
        r.train_loss,
        r.train_accuracy,
        opt(r.val_loss),
        opt(r.val_auc),
        opt(r.val_accuracy)
    )
}

/// Writes `history.log` (one line per epoch) and `history.csv`.
pub fn write_history(dir: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut log = std::fs::File::create(dir.join("history.log"))?;
    for r in history {
        writeln!(log, "{}", history_line(r))?;
    }
    let mut w = csv::Writer::from_path(dir.join("history.csv")).map_err(std::io::Error::other)?;
    w.write_record(["epoch", "step", "train_loss", "train_accuracy", "val_loss", "val_auc", "val_accuracy"])
        .map_err(std::io::Error::other)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.train_loss.to_string(),
            r.train_accuracy.to_string(),
            opt(r.val_loss),
            opt(r.val_auc),
            opt(r.val_accuracy),
        ])
        .map_err(std::io::Error::other)?;
    }
    w.flush()?;
    Ok(())
}
