//! Resolved run configurations, written next to every output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use covidscreen_core::nn::model::{CHEXPERT_DIM, PNEUMONIA_DIM};
use covidscreen_core::nn::{AuxExtractor, AuxSpec, CxrNet, Model, ModelSpec, NnError, Task};
use covidscreen_core::preprocess::PreprocessConfig;
use covidscreen_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Square input side; 256 for the full network, 64 for the tiny one.
    pub input_size: Option<usize>,
    pub backbone_weights: Option<PathBuf>,
    pub aux_chexpert: Option<PathBuf>,
    pub aux_pneumonia: Option<PathBuf>,
    /// Constant auxiliary features (CXR); implied by the tiny preset.
    pub aux_stub: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    pub ratios: [f64; 3],
    /// `None` groups by patient for CT only.
    pub group_by_patient: Option<bool>,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { ratios: [0.7, 0.1, 0.2], group_by_patient: None }
    }
}

/// Everything `train` needs besides the data and output paths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitSettings,
}

impl TrainRunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

fn stub(dim: usize) -> AuxExtractor {
    AuxExtractor::Constant(vec![0.5; dim])
}

/// Builds a freshly initialized model; loads backbone and auxiliary weights when configured.
pub fn build_model(task: Task, cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut spec = match (cfg.preset, task) {
        (Preset::Tiny, _) => ModelSpec::tiny(task, cfg.input_size.unwrap_or(64)),
        (Preset::Full, Task::Cxr) => ModelSpec::deep_cxr_net(AuxSpec::constant()),
        (Preset::Full, Task::Ct) => ModelSpec::deep_ct_net(),
        (Preset::Full, t) => ModelSpec::aux_network(t),
    };
    if let Some(s) = cfg.input_size {
        spec.input_size = [s, s];
    }
    spec.pretrained_backbone = cfg.backbone_weights.is_some();
    let model = if task == Task::Cxr {
        let allow_stub = cfg.aux_stub || cfg.preset == Preset::Tiny;
        let aux = |path: &Option<PathBuf>, aux_task: Task, dim: usize| -> Result<AuxExtractor> {
            match path {
                Some(p) => Ok(AuxExtractor::from_checkpoint(p, aux_task)?),
                None if allow_stub => Ok(stub(dim)),
                None => Err(NnError::MissingAuxCheckpoint(format!(
                    "no {} checkpoint configured; give one or opt into constant stub features",
                    aux_task.as_str()
                ))
                .into()),
            }
        };
        let chexpert = aux(&cfg.aux_chexpert, Task::Chexpert6, CHEXPERT_DIM)?;
        let pneumonia = aux(&cfg.aux_pneumonia, Task::Pneumonia2, PNEUMONIA_DIM)?;
        Model::Cxr(CxrNet::with_aux(&spec, DType::F32, seed, chexpert, pneumonia)?)
    } else {
        Model::new(&spec, DType::F32, seed)?
    };
    if let Some(w) = &cfg.backbone_weights {
        let n = model.load_backbone_weights(w).with_context(|| format!("loading backbone weights {}", w.display()))?;
        tracing::info!(tensors = n, path = %w.display(), "backbone weights loaded");
    } else if cfg.preset == Preset::Full {
        tracing::warn!("no backbone weights configured; the backbone starts from random initialization");
    }
    Ok(model)
}

/// `<dir>/run_config.toml` for directory outputs, `<file>.run_config.toml` otherwise.
pub fn run_config_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run_config.toml")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".run_config.toml");
        out.with_file_name(name)
    }
}

/// Serializes `body` with the command name and tool version on top; returns the text.
pub fn write_run_config<T: Serialize>(out: &Path, command: &str, body: &T) -> Result<String> {
    let mut table = toml::Table::new();
    table.insert("command".into(), command.into());
    table.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
    match toml::Value::try_from(body).context("serializing run config")? {
        toml::Value::Table(t) => table.extend(t),
        _ => bail!("run config must serialize to a table"),
    }
    let text = toml::to_string(&table).context("serializing run config")?;
    let path = run_config_path(out);
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    Ok(text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_round_trips_through_toml() {
        let mut cfg = TrainRunConfig { seed: 9, ..Default::default() };
        cfg.model.preset = Preset::Tiny;
        cfg.train.class_weights = Some(vec![1.0, 2.0, 0.5]);
        cfg.split.group_by_patient = Some(false);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<TrainRunConfig>(&text).unwrap(), cfg);
        // a partial file keeps every other default
        let partial: TrainRunConfig = toml::from_str("seed = 3\n[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(partial.train.batch_size, 4);
        assert_eq!(partial.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(partial.preprocess, PreprocessConfig::default());
    }

    #[test]
    fn cxr_without_aux_checkpoints_is_refused() {
        let err = build_model(Task::Cxr, &ModelConfig { input_size: Some(64), ..Default::default() }, 0).unwrap_err();
        assert!(err.to_string().contains("auxiliary"), "{err}");
        let tiny = ModelConfig { preset: Preset::Tiny, ..Default::default() };
        assert_eq!(build_model(Task::Cxr, &tiny, 0).unwrap().spec().concat_len(), ModelSpec::tiny(Task::Cxr, 64).concat_len());
    }

    #[test]
    fn run_config_sits_next_to_the_output() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_config_path(dir.path()), dir.path().join("run_config.toml"));
        assert_eq!(run_config_path(&dir.path().join("roc.txt")), dir.path().join("roc.txt.run_config.toml"));
    }
}
