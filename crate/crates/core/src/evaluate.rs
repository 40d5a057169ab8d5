//! Scoring a model over a manifest split or an external dataset.

use crate::data::{DatasetManifest, Label, Split};
use crate::metrics::{build_report, EvalMode, EvalReport, ScoredExample};
use crate::nn::{Model, Prediction, Task};
use crate::preprocess::PreprocessConfig;
use crate::train::{predict_source, ManifestSource, Result, SampleSource, TrainError};

pub fn eval_mode(task: Task) -> Result<EvalMode> {
    match task {
        Task::Ct => Ok(EvalMode::Ct3),
        Task::Cxr => Ok(EvalMode::CxrBinary),
        t => Err(TrainError::InvalidConfig(format!("no screening evaluation for the {} task", t.as_str()))),
    }
}

pub fn scored_example(task: Task, image_id: String, true_label: Label, probabilities: Vec<f64>) -> ScoredExample {
    let pred = Prediction::from_probabilities(probabilities);
    ScoredExample {
        image_id,
        true_label,
        score: pred.covid_score(),
        predicted_label: if task == Task::Ct { pred.label(task) } else { None },
        probabilities: pred.probabilities,
    }
}

/// Eval-mode scores for every sample of a source.
pub fn score_source(model: &Model, src: &dyn SampleSource, batch_size: usize) -> Result<Vec<ScoredExample>> {
    let task = model.spec().task;
    eval_mode(task)?;
    let probs = predict_source(model, src, batch_size)?;
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| scored_example(task, src.id(i), src.label(i), p))
        .collect())
}

/// Metrics on one split of a manifest.
pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    preprocess: &PreprocessConfig,
    batch_size: usize,
) -> Result<(EvalReport, Vec<ScoredExample>)> {
    let src = ManifestSource::new(manifest, split, preprocess.clone());
    if src.is_empty() {
        return Err(TrainError::EmptySplit(split.as_str()));
    }
    let scored = score_source(model, &src, batch_size)?;
    Ok((build_report(&scored, eval_mode(model.spec().task)?)?, scored))
}

/// Metrics on every record of an external dataset whose labels were mapped at load time.
pub fn cross_dataset_eval(
    model: &Model,
    manifest: &DatasetManifest,
    preprocess: &PreprocessConfig,
    batch_size: usize,
) -> Result<(EvalReport, Vec<ScoredExample>)> {
    let src = ManifestSource::all(manifest, preprocess.clone());
    if src.is_empty() {
        return Err(TrainError::EmptySplit("external"));
    }
    let scored = score_source(model, &src, batch_size)?;
    Ok((build_report(&scored, eval_mode(model.spec().task)?)?, scored))
}

/// `image_id,true_label,score,p0,p1,...` lines.
pub fn scores_csv(scored: &[ScoredExample]) -> String {
    let mut s = String::from("image_id,true_label,score,probabilities\n");
    for e in scored {
        let probs: Vec<String> = e.probabilities.iter().map(|p| format!("{p:.8}")).collect();
        s.push_str(&format!("{},{},{:.8},{}\n", e.image_id, e.true_label.as_str(), e.score, probs.join(";")));
    }
    s
}
