//! Loaded checkpoints per modality. Reload swaps the whole registry at once.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use covidscreen_core::data::{Label, LabelMap, Modality};
use covidscreen_core::nn::checkpoint::file_sha256;
use covidscreen_core::nn::{Checkpoint, Model, Prediction, Task};
use covidscreen_core::preprocess::PreprocessConfig;
use serde::Serialize;

use crate::config::ServiceConfig;

/// Name reported for the negative decision of the binary CXR model.
pub const NON_COVID: &str = "non_covid19";

pub struct LoadedModel {
    pub model: Model,
    /// `<task>-<first 12 hex digits of the checkpoint SHA-256>`.
    pub version: String,
    pub path: PathBuf,
    pub preprocess: PreprocessConfig,
}

impl LoadedModel {
    pub fn load(path: &Path, modality: Modality) -> Result<Self, String> {
        let ckpt = Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let expected = task_for(modality);
        if ckpt.model_spec.task != expected {
            return Err(format!(
                "{}: holds a {} model, slot expects {}",
                path.display(),
                ckpt.model_spec.task.as_str(),
                expected.as_str()
            ));
        }
        let model = ckpt.into_model().map_err(|e| format!("{}: {e}", path.display()))?;
        let sha = file_sha256(path).map_err(|e| e.to_string())?;
        let [h, w] = model.spec().input_size;
        let preprocess = ckpt.meta.preprocess.clone().unwrap_or_default().with_target(h, w);
        Ok(Self { version: format!("{}-{}", expected.as_str(), &sha[..12]), model, path: path.to_path_buf(), preprocess })
    }

    pub fn task(&self) -> Task {
        self.model.spec().task
    }

    /// CAM target names, indexed by class.
    pub fn class_names(&self) -> Vec<&'static str> {
        class_names(self.task())
    }

    pub fn describe(&self, p: &Prediction) -> (Vec<(String, f64)>, String) {
        describe(self.task(), p)
    }

    /// Class a heatmap targets when the client does not ask for one: the predicted class.
    pub fn default_class(&self, predicted_label: &str) -> usize {
        self.class_names().iter().position(|n| *n == predicted_label).unwrap_or(0)
    }
}

/// Class name to probability, plus the predicted label.
pub fn describe(task: Task, p: &Prediction) -> (Vec<(String, f64)>, String) {
    match task {
        Task::Cxr => {
            let label = if p.y == Some(1) { Label::Covid19.as_str() } else { NON_COVID };
            (vec![(Label::Covid19.as_str().to_string(), p.probabilities[0])], label.to_string())
        }
        _ => {
            let names = class_names(task);
            let probs = names.iter().zip(&p.probabilities).map(|(n, v)| (n.to_string(), *v)).collect();
            (probs, names.get(p.argmax).copied().unwrap_or("unknown").to_string())
        }
    }
}

pub fn class_names(task: Task) -> Vec<&'static str> {
    match task {
        Task::Cxr => vec![Label::Covid19.as_str(), NON_COVID],
        _ => Label::ALL.iter().map(|l| l.as_str()).collect(),
    }
}

/// Class index from an index, a class name, or a label alias such as `covid`.
pub fn parse_class(task: Task, raw: &str) -> Option<usize> {
    let names = class_names(task);
    let raw = raw.trim();
    let class = raw
        .parse::<usize>()
        .ok()
        .or_else(|| names.iter().position(|n| n.eq_ignore_ascii_case(raw)))
        .or_else(|| {
            let label = LabelMap::canonical().get(raw)?;
            Some(if task == Task::Cxr { usize::from(!label.is_covid()) } else { label.index() })
        })?;
    (class < names.len()).then_some(class)
}

pub fn task_for(modality: Modality) -> Task {
    match modality {
        Modality::Ct => Task::Ct,
        Modality::Cxr => Task::Cxr,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlotStatus {
    pub loaded: bool,
    pub version: Option<String>,
    pub path: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Default)]
struct Slot {
    model: Option<Arc<LoadedModel>>,
    path: Option<PathBuf>,
    error: Option<String>,
}

impl Slot {
    fn load(path: Option<&PathBuf>, modality: Modality) -> Self {
        let Some(path) = path else { return Self::default() };
        match LoadedModel::load(path, modality) {
            Ok(m) => {
                tracing::info!(modality = %modality, version = %m.version, "model loaded");
                Self { model: Some(Arc::new(m)), path: Some(path.clone()), error: None }
            }
            Err(e) => {
                tracing::warn!(modality = %modality, error = %e, "model not loaded");
                Self { model: None, path: Some(path.clone()), error: Some(e) }
            }
        }
    }

    fn status(&self) -> SlotStatus {
        SlotStatus {
            loaded: self.model.is_some(),
            version: self.model.as_ref().map(|m| m.version.clone()),
            path: self.path.clone(),
            error: self.error.clone(),
        }
    }
}

pub struct Registry {
    ct: Slot,
    cxr: Slot,
}

impl Registry {
    /// Loads whatever checkpoints the configuration names; failures leave the slot empty.
    pub fn load(config: &ServiceConfig) -> Self {
        Self {
            ct: Slot::load(config.ct_checkpoint.as_ref(), Modality::Ct),
            cxr: Slot::load(config.cxr_checkpoint.as_ref(), Modality::Cxr),
        }
    }

    pub fn get(&self, modality: Modality) -> Option<Arc<LoadedModel>> {
        match modality {
            Modality::Ct => self.ct.model.clone(),
            Modality::Cxr => self.cxr.model.clone(),
        }
    }

    pub fn status(&self) -> [(Modality, SlotStatus); 2] {
        [(Modality::Ct, self.ct.status()), (Modality::Cxr, self.cxr.status())]
    }

    pub fn all_loaded(&self) -> bool {
        self.ct.model.is_some() && self.cxr.model.is_some()
    }
}
