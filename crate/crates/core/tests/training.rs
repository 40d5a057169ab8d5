use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use candle_core::DType;
use covidscreen_core::data::Label;
use covidscreen_core::nn::layers::to_f64_rows;
use covidscreen_core::nn::{AuxSource, AuxSpec, Checkpoint, Model, ModelSpec, NnError, Task};
use covidscreen_core::preprocess::{Mode, PreprocessConfig};
use covidscreen_core::synthetic::{preprocess_config, source, two_class_squares};
use covidscreen_core::train::{
    bce_loss_values, load_batch, predict_source, target_for, InMemorySource, SampleSource, TrainConfig, TrainError,
    Trainer,
};

fn tiny_ct(seed: u64) -> Model {
    Model::new(&ModelSpec::tiny(Task::Ct, 64), DType::F32, seed).unwrap()
}

fn smoke_config() -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, batch_size: 10, max_epochs: 1000, early_stop_patience: 0, seed: 1, ..Default::default() }
}

fn augmented_source(n: usize, seed: u64) -> InMemorySource {
    let cfg = PreprocessConfig::default().with_target(64, 64);
    source(&two_class_squares(n, 64, seed), cfg)
}

fn eval_accuracy(model: &Model, src: &InMemorySource) -> f64 {
    let probs = predict_source(model, src, 10).unwrap();
    let task = model.spec().task;
    let ok = probs.iter().enumerate().filter(|(i, p)| covidscreen_core::train::is_correct(task, p, src.label(*i))).count();
    ok as f64 / src.len() as f64
}

#[test]
fn overfits_twenty_images_within_300_steps() {
    let src = source(&two_class_squares(20, 64, 11), preprocess_config(64));
    let start = Instant::now();
    let mut t = Trainer::new(tiny_ct(5), smoke_config()).unwrap();
    let mut reached = None;
    while t.state().step < 300 {
        t.run_epoch(&src, None).unwrap();
        if eval_accuracy(t.model(), &src) == 1.0 {
            reached = Some(t.state().step);
            break;
        }
    }
    let elapsed = start.elapsed();
    assert!(reached.is_some_and(|s| s <= 300), "train accuracy below 1.0 after {} steps", t.state().step);
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
}

#[test]
fn first_batch_loss_is_near_ln2() {
    let src = augmented_source(16, 3);
    let idx: Vec<usize> = (0..16).collect();
    let batch = load_batch(&src, &idx, Mode::Eval, 0, 0).unwrap();
    let labels: Vec<Label> = idx.iter().map(|&i| src.label(i)).collect();
    let mut targets = Vec::new();
    for l in &labels {
        targets.extend(target_for(Task::Ct, *l).unwrap());
    }
    for seed in 0..10 {
        let model = tiny_ct(seed);
        // first training batch: normalization uses batch statistics
        let x = model.input_tensor(&batch).unwrap();
        let probs: Vec<f64> = to_f64_rows(&model.forward(&x, true).unwrap()).unwrap().concat();
        let loss = bce_loss_values(&probs, &targets).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 0.15, "seed {seed}: {loss}");
    }
}

#[test]
fn same_seed_same_first_epoch() {
    let src = augmented_source(20, 4);
    let run = || {
        let mut t = Trainer::new(tiny_ct(7), TrainConfig { batch_size: 4, ..smoke_config() }).unwrap();
        t.run_epoch(&src, None).unwrap().step_losses
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    let idx: Vec<usize> = (0..20).collect();
    let x1 = load_batch(&src, &idx, Mode::Train, 9, 0).unwrap();
    let x2 = load_batch(&src, &idx, Mode::Train, 9, 0).unwrap();
    assert_eq!(x1, x2);
    assert_ne!(x1, load_batch(&src, &idx, Mode::Train, 10, 0).unwrap());
    // eval mode ignores the augmentation stream
    assert_eq!(load_batch(&src, &idx, Mode::Eval, 9, 0).unwrap(), load_batch(&src, &idx, Mode::Eval, 10, 3).unwrap());
}

#[test]
fn two_epochs_equal_one_plus_resume() {
    let src = augmented_source(12, 5);
    let cfg = TrainConfig { batch_size: 4, max_epochs: 2, ..smoke_config() };
    let mut straight = Trainer::new(tiny_ct(8), cfg.clone()).unwrap();
    straight.fit(&src, None).unwrap();

    let mut first = Trainer::new(tiny_ct(8), TrainConfig { max_epochs: 1, ..cfg.clone() }).unwrap();
    first.fit(&src, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epoch1.ckpt");
    first.checkpoint().unwrap().save(&path).unwrap();

    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(tiny_ct(99), &ckpt, cfg).unwrap();
    resumed.fit(&src, None).unwrap();
    assert_eq!(resumed.state().epoch, 2);
    assert_eq!(resumed.model().export_tensors().unwrap(), straight.model().export_tensors().unwrap());
}

#[test]
fn resume_into_other_spec_fails() {
    let t = Trainer::new(tiny_ct(1), smoke_config()).unwrap();
    let ckpt = t.checkpoint().unwrap();
    let other = Model::new(&ModelSpec::tiny(Task::Cxr, 64), DType::F32, 1).unwrap();
    assert!(matches!(Trainer::resume(other, &ckpt, smoke_config()), Err(TrainError::Nn(NnError::VersionMismatch(_)))));
}

#[test]
fn divergence_restores_last_finite_state() {
    let src = augmented_source(8, 6);
    let mut t = Trainer::new(tiny_ct(2), TrainConfig { learning_rate: 1e300, batch_size: 2, ..smoke_config() }).unwrap();
    let mut outcome = None;
    for _ in 0..5 {
        match t.run_epoch(&src, None) {
            Ok(rec) => assert!(rec.step_losses.iter().all(|v| v.is_finite())),
            Err(e) => {
                outcome = Some(e);
                break;
            }
        }
    }
    let Some(TrainError::DivergenceDetected { last_good, .. }) = outcome else {
        panic!("expected divergence, got {outcome:?}")
    };
    let weights = t.model().export_tensors().unwrap();
    for (k, v) in &weights {
        assert_eq!(Some(v), last_good.tensors.get(k), "{k}");
    }
    assert_eq!(t.state(), last_good.meta.train_state.as_ref().unwrap());
}

#[test]
fn aux_parameters_stay_frozen_for_50_steps() {
    let aux = AuxSpec {
        chexpert: AuxSource::Network { spec: Box::new(ModelSpec::tiny(Task::Chexpert6, 64)) },
        pneumonia: AuxSource::Network { spec: Box::new(ModelSpec::tiny(Task::Pneumonia2, 64)) },
    };
    let spec = ModelSpec { aux: Some(aux), ..ModelSpec::tiny(Task::Cxr, 64) };
    let model = Model::new(&spec, DType::F32, 4).unwrap();
    let frozen = model.frozen_digest().unwrap().unwrap();
    let trainable = model.weights_digest().unwrap();
    assert!(model.trainable().iter().all(|(n, _)| !n.starts_with("aux.")));

    let src = augmented_source(20, 7);
    let mut t = Trainer::new(model, TrainConfig { batch_size: 2, max_steps: Some(50), ..smoke_config() }).unwrap();
    t.fit(&src, None).unwrap();
    assert_eq!(t.state().step, 50);
    assert_eq!(t.model().frozen_digest().unwrap().unwrap(), frozen);
    assert_ne!(t.model().weights_digest().unwrap(), trainable);
}

fn sub_block(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts[0] == "backbone" { 3 } else { 2 };
    parts[..depth.min(parts.len() - 1)].join(".")
}

#[test]
fn one_step_moves_every_sub_block() {
    for task in [Task::Ct, Task::Cxr] {
        let model = Model::new(&ModelSpec::tiny(task, 64), DType::F32, 6).unwrap();
        let before = model.store().export().unwrap();
        let src = augmented_source(8, 8);
        let idx: Vec<usize> = (0..8).collect();
        let batch = load_batch(&src, &idx, Mode::Train, 0, 0).unwrap();
        let labels: Vec<Label> = idx.iter().map(|&i| src.label(i)).collect();
        let mut t = Trainer::new(model, smoke_config()).unwrap();
        t.train_step(&batch, &labels).unwrap();
        let after = t.model().store().export().unwrap();
        let mut moved: BTreeMap<String, bool> = BTreeMap::new();
        for (name, _) in t.model().trainable() {
            let changed = before[&name] != after[&name];
            *moved.entry(sub_block(&name)).or_default() |= changed;
        }
        assert!(moved.len() >= 6, "{moved:?}");
        let stuck: Vec<_> = moved.iter().filter(|(_, m)| !**m).map(|(k, _)| k).collect();
        assert!(stuck.is_empty(), "{task:?}: unchanged sub-blocks {stuck:?}");
    }
}
