use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use covidscreen_core::cam::{grad_cam, render_overlay};
use covidscreen_core::data::{Label, Split};
use covidscreen_core::evaluate::{cross_dataset_eval, evaluate, scores_csv};
use covidscreen_core::metrics::false_positive_analysis;
use covidscreen_core::nn::{Checkpoint, CheckpointMeta, Model, Task};
use covidscreen_core::preprocess::{run_pipeline, sample_rng, Mode, PreprocessConfig, RasterImage};
use covidscreen_core::train::{history_line, write_history, ManifestSource, SampleSource, TrainError, Trainer};
use covidscreen_service::models::{class_names, describe, parse_class};
use serde::Serialize;

use crate::args::{CamArgs, EvalArgs, InitArgs, PredictArgs, TrainArgs};
use crate::data_cmd::load_dataset;
use crate::run_config::{build_model, sha256_hex, write_run_config, ModelConfig, Preset, TrainRunConfig};

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Stored preprocessing settings (defaults otherwise), resized to the model input.
pub fn eval_preprocess(ckpt: &Checkpoint) -> PreprocessConfig {
    let [h, w] = ckpt.model_spec.input_size;
    ckpt.meta.preprocess.clone().unwrap_or_default().with_target(h, w)
}

#[derive(Serialize)]
struct TrainRunRecord<'a> {
    #[serde(flatten)]
    config: &'a TrainRunConfig,
    modality: &'static str,
    data: String,
    out: String,
    resume: Option<String>,
    model_spec: &'a covidscreen_core::nn::ModelSpec,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let task: Task = args.model.into();
    let mut cfg = match &args.config {
        Some(p) => TrainRunConfig::load(p)?,
        None => TrainRunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if args.tiny {
        cfg.model.preset = Preset::Tiny;
    }
    if args.input_size.is_some() {
        cfg.model.input_size = args.input_size;
    }
    cfg.train.validate()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut manifest = load_dataset(&args.dataset)?;
    if !manifest.is_fully_split() {
        if !manifest.splits.is_empty() {
            bail!("manifest assigns splits to only some records; run `data split` first");
        }
        let [a, b, c] = cfg.split.ratios;
        let group = cfg.split.group_by_patient.unwrap_or(task == Task::Ct);
        let ratios = covidscreen_core::data::SplitRatios::new(a, b, c)?;
        let assignment = covidscreen_core::data::stratified_split(&manifest.records, ratios, cfg.seed, group)?;
        manifest.apply_split(&assignment);
        tracing::info!(grouped = group, "no split in the data; assigned one from the run config");
    }
    let mut saved = manifest.clone();
    let root = manifest.root.canonicalize().unwrap_or_else(|_| manifest.root.clone());
    for r in &mut saved.records {
        r.path = root.join(&r.path);
    }
    saved.save(&args.out.join("manifest.csv"))?;

    let (mut trainer, spec) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let model = ckpt.into_model()?;
            if model.spec().task != task {
                bail!("{} holds a {} model, not {}", path.display(), model.spec().task.as_str(), task.as_str());
            }
            let spec = model.spec().clone();
            (Trainer::resume(model, &ckpt, cfg.train.clone())?, spec)
        }
        None => {
            let model = build_model(task, &cfg.model, cfg.seed)?;
            let spec = model.spec().clone();
            (Trainer::new(model, cfg.train.clone())?, spec)
        }
    };
    let [h, w] = spec.input_size;
    let preprocess = cfg.preprocess.clone().with_target(h, w);
    cfg.preprocess = preprocess.clone();

    let record = TrainRunRecord {
        config: &cfg,
        modality: task.as_str(),
        data: args.dataset.data.as_ref().or(args.dataset.manifest.as_ref()).map(|p| p.display().to_string()).unwrap_or_default(),
        out: args.out.display().to_string(),
        resume: args.resume.as_ref().map(|p| p.display().to_string()),
        model_spec: &spec,
    };
    write_run_config(&args.out, "train", &record)?;
    // paths stay out of the hash so a rerun elsewhere matches
    let hashed = serde_json::to_string(&(&cfg, task.as_str(), &spec)).context("serializing run config")?;
    trainer.set_meta(CheckpointMeta {
        config_hash: sha256_hex(hashed.as_bytes()),
        preprocess: Some(preprocess.clone()),
        seed: cfg.seed,
        ..Default::default()
    });

    let train_src = ManifestSource::new(&manifest, Split::Train, preprocess.clone());
    let val_src = ManifestSource::new(&manifest, Split::Val, preprocess);
    let val: Option<&dyn SampleSource> = (!val_src.is_empty()).then_some(&val_src as &dyn SampleSource);
    println!("training {} on {} images ({} validation)", task.as_str(), train_src.len(), val_src.len());

    let mut history = Vec::new();
    while !trainer.finished() {
        let rec = match trainer.run_epoch(&train_src, val) {
            Ok(r) => r,
            Err(TrainError::DivergenceDetected { epoch, step, last_good }) => {
                let path = args.out.join("last_good.ckpt");
                last_good.save(&path)?;
                write_history(&args.out, &history)?;
                bail!("loss diverged at epoch {epoch}, step {step}; last good state saved to {}", path.display());
            }
            Err(e) => return Err(e.into()),
        };
        println!("{}", history_line(&rec));
        history.push(rec);
        write_history(&args.out, &history)?;
        trainer.checkpoint()?.save(&args.out.join("last.ckpt"))?;
        if trainer.state().best_epoch == Some(trainer.state().epoch) || val.is_none() {
            if let Some(best) = trainer.best() {
                best.save(&args.out.join("best.ckpt"))?;
            }
        }
    }
    if !args.out.join("best.ckpt").exists() {
        trainer.checkpoint()?.save(&args.out.join("best.ckpt"))?;
    }
    println!("checkpoints written to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRun {
    seed: u64,
    ckpt: String,
    checkpoint_sha256: String,
    data: String,
    split: String,
    label_map: Option<String>,
    batch_size: usize,
    preprocess: PreprocessConfig,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.into_model()?;
    let preprocess = eval_preprocess(&ckpt);
    let manifest = load_dataset(&args.dataset)?;
    let external = args.dataset.label_map.is_some();
    let (report, scored) = if external {
        cross_dataset_eval(&model, &manifest, &preprocess, args.batch_size)?
    } else {
        let split = match args.split.as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => bail!("unknown split {other:?}, expected train, val or test"),
        };
        evaluate(&model, &manifest, split, &preprocess, args.batch_size)?
    };
    let method = args.method.clone().unwrap_or_else(|| model.spec().task.as_str().to_string());
    let mut text = report.to_text(&method);
    if !report.subgroups.iter().any(|s| s.label == Label::OtherPneumonia) {
        if let Ok(fp) = false_positive_analysis(&scored, Label::OtherPneumonia) {
            let _ = writeln!(text, "other_pneumonia predicted positive: {}/{} ({:.3})", fp.predicted_positive, fp.members, fp.rate);
        }
    }
    if let Some(dir) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.report, &text).with_context(|| format!("writing {}", args.report.display()))?;
    std::fs::write(sibling(&args.report, ".json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(sibling(&args.report, ".roc.txt"), report.roc.to_text())?;
    std::fs::write(sibling(&args.report, ".scores.csv"), scores_csv(&scored))?;
    print!("{text}");
    let run = EvalRun {
        seed: args.seed,
        ckpt: args.ckpt.display().to_string(),
        checkpoint_sha256: sha256_hex(&std::fs::read(&args.ckpt)?),
        data: args.dataset.data.as_ref().or(args.dataset.manifest.as_ref()).map(|p| p.display().to_string()).unwrap_or_default(),
        split: if external { "all".into() } else { args.split.clone() },
        label_map: args.dataset.label_map.as_ref().map(|p| p.display().to_string()),
        batch_size: args.batch_size,
        preprocess,
    };
    write_run_config(&args.report, "eval", &run)?;
    Ok(())
}

fn preprocess_image(path: &Path, cfg: &PreprocessConfig) -> Result<(RasterImage, covidscreen_core::preprocess::NormalizedTensor)> {
    let img = RasterImage::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let mut t = run_pipeline(&img, Mode::Eval, &mut sample_rng(0, 0, 0), cfg)?;
    t.source_id = Some(path.display().to_string());
    Ok((img, t))
}

#[derive(Serialize)]
struct PredictLine {
    image: String,
    predicted_label: String,
    probabilities: std::collections::BTreeMap<String, f64>,
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.into_model()?;
    let cfg = eval_preprocess(&ckpt);
    let task = model.spec().task;
    let mut csv = String::from("image,predicted_label,probabilities\n");
    for path in &args.image {
        let (_, t) = preprocess_image(path, &cfg)?;
        let p = model.predict_images(std::slice::from_ref(&t))?.remove(0);
        let (probs, label) = describe(task, &p);
        let line = PredictLine { image: path.display().to_string(), predicted_label: label, probabilities: probs.into_iter().collect() };
        let probs_text: Vec<String> = line.probabilities.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        if args.json {
            println!("{}", serde_json::to_string(&line)?);
        } else {
            println!("{}\t{}\t{}", line.image, line.predicted_label, probs_text.join(" "));
        }
        let _ = writeln!(csv, "{},{},{}", line.image, line.predicted_label, probs_text.join(";"));
    }
    if let Some(out) = &args.out {
        std::fs::write(out, csv)?;
        #[derive(Serialize)]
        struct Run<'a> {
            seed: u64,
            ckpt: String,
            images: Vec<String>,
            preprocess: &'a PreprocessConfig,
        }
        let images = args.image.iter().map(|p| p.display().to_string()).collect();
        write_run_config(out, "predict", &Run { seed: args.seed, ckpt: args.ckpt.display().to_string(), images, preprocess: &cfg })?;
    }
    Ok(())
}

pub fn cam(args: &CamArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.alpha) {
        bail!("--alpha must lie in [0, 1], got {}", args.alpha);
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.into_model()?;
    let cfg = eval_preprocess(&ckpt);
    let task = model.spec().task;
    let (img, t) = preprocess_image(&args.image, &cfg)?;
    let class = match &args.class {
        Some(raw) => parse_class(task, raw)
            .with_context(|| format!("class {raw:?} is not one of {:?}", class_names(task)))?,
        None => default_class(&model, &t)?,
    };
    let cam = grad_cam(&model, &t, class)?;
    let (w, h) = (img.width(), img.height());
    let overlay = render_overlay(&img.to_rgb8(), &cam.resized(h, w), w, h, args.alpha)?;
    overlay.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.heatmap {
        cam.write_heatmap(path)?;
    }
    println!(
        "class {} ({}) score {:.6}{} -> {}",
        class,
        class_names(task)[class],
        cam.score,
        if cam.degenerate { " [degenerate: no positive evidence]" } else { "" },
        args.out.display()
    );
    #[derive(Serialize)]
    struct Run {
        seed: u64,
        ckpt: String,
        image: String,
        class: usize,
        alpha: f64,
        heatmap: Option<String>,
        preprocess: PreprocessConfig,
    }
    let run = Run {
        seed: args.seed,
        ckpt: args.ckpt.display().to_string(),
        image: args.image.display().to_string(),
        class,
        alpha: args.alpha,
        heatmap: args.heatmap.as_ref().map(|p| p.display().to_string()),
        preprocess: cfg,
    };
    write_run_config(&args.out, "cam", &run)?;
    Ok(())
}

fn default_class(model: &Model, t: &covidscreen_core::preprocess::NormalizedTensor) -> Result<usize> {
    let p = model.predict_images(std::slice::from_ref(t))?.remove(0);
    Ok(match p.y {
        Some(y) => usize::from(y == 0),
        None => p.argmax,
    })
}

pub fn init_checkpoint(args: &InitArgs) -> Result<()> {
    let task: Task = args.model.into();
    let mc = ModelConfig {
        preset: if args.tiny { Preset::Tiny } else { Preset::Full },
        input_size: args.input_size,
        backbone_weights: args.backbone_weights.clone(),
        aux_chexpert: args.aux_chexpert.clone(),
        aux_pneumonia: args.aux_pneumonia.clone(),
        aux_stub: args.aux_stub,
    };
    let model = build_model(task, &mc, args.seed)?;
    let [h, w] = model.spec().input_size;
    let meta = CheckpointMeta {
        seed: args.seed,
        preprocess: Some(PreprocessConfig::default().with_target(h, w)),
        note: "random initialization".into(),
        ..Default::default()
    };
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Checkpoint::from_model(&model, meta)?.save(&args.out)?;
    println!("{} checkpoint ({}x{} input) written to {}", task.as_str(), h, w, args.out.display());
    #[derive(Serialize)]
    struct Run<'a> {
        seed: u64,
        modality: &'a str,
        model: &'a ModelConfig,
    }
    write_run_config(&args.out, "init-checkpoint", &Run { seed: args.seed, modality: task.as_str(), model: &mc })?;
    Ok(())
}
