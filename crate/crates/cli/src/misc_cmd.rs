use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use covidscreen_core::metrics::{parse_scores, roc_auc};
use covidscreen_core::preprocess::{run_pipeline, sample_rng, Mode, PreprocessConfig, RasterImage};
use covidscreen_core::tensor_io::write_tensor;
use covidscreen_service::ServiceConfig;
use serde::Serialize;

use crate::args::{PreprocessArgs, RocArgs, ServeArgs};
use crate::run_config::write_run_config;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn image_files(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    files
}

pub fn preprocess(args: &PreprocessArgs) -> Result<()> {
    if !args.input.is_dir() {
        bail!("input directory not found: {}", args.input.display());
    }
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<PreprocessConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PreprocessConfig::default(),
    };
    if let Some(s) = args.size {
        cfg = cfg.with_target(s, s);
    }
    cfg.validate()?;
    let mode: Mode = args.mode.into();
    let files = image_files(&args.input);
    if files.is_empty() {
        bail!("no images under {}", args.input.display());
    }
    std::fs::create_dir_all(&args.out)?;
    let mut index = String::from("index,source,tensor,height,width,channels,degenerate\n");
    for (i, file) in files.iter().enumerate() {
        let rel = file.strip_prefix(&args.input).unwrap_or(file);
        let img = RasterImage::open(file).with_context(|| format!("reading {}", file.display()))?;
        let t = run_pipeline(&img, mode, &mut sample_rng(args.seed, 0, i as u64), &cfg)?;
        let out = args.out.join(rel).with_extension("cstn");
        if let Some(dir) = out.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_tensor(&out, &[t.height, t.width, t.channels], &t.values)?;
        let _ = writeln!(
            index,
            "{i},{},{},{},{},{},{}",
            rel.display(),
            out.strip_prefix(&args.out).unwrap_or(&out).display(),
            t.height,
            t.width,
            t.channels,
            t.degenerate
        );
    }
    std::fs::write(args.out.join("index.csv"), index)?;
    println!("{} tensors written to {}", files.len(), args.out.display());
    #[derive(Serialize)]
    struct Run<'a> {
        seed: u64,
        mode: &'a str,
        input: String,
        preprocess: &'a PreprocessConfig,
    }
    let mode_name = if mode == Mode::Train { "train" } else { "eval" };
    write_run_config(
        &args.out,
        "preprocess",
        &Run { seed: args.seed, mode: mode_name, input: args.input.display().to_string(), preprocess: &cfg },
    )?;
    Ok(())
}

pub fn roc(args: &RocArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.scores).with_context(|| format!("reading {}", args.scores.display()))?;
    let (scores, labels) = parse_scores(&text)?;
    let curve = roc_auc(&scores, &labels)?;
    let points = curve.to_text();
    std::fs::write(&args.out, &points).with_context(|| format!("writing {}", args.out.display()))?;
    print!("{points}");
    println!("AUC {}", curve.auc);
    #[derive(Serialize)]
    struct Run {
        seed: u64,
        scores: String,
        n: usize,
        positives: usize,
    }
    let run = Run {
        seed: args.seed,
        scores: args.scores.display().to_string(),
        n: scores.len(),
        positives: labels.iter().filter(|l| **l).count(),
    };
    write_run_config(&args.out, "roc", &run)?;
    Ok(())
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let base = match &args.config {
        Some(p) => ServiceConfig::from_file(p)?,
        None => ServiceConfig::default(),
    };
    let mut cfg = base.with_env()?;
    if let Some(b) = &args.bind {
        cfg.bind = b.clone();
    }
    if let Some(p) = args.port {
        cfg.port = p;
    }
    if args.ct_checkpoint.is_some() {
        cfg.ct_checkpoint = args.ct_checkpoint.clone();
    }
    if args.cxr_checkpoint.is_some() {
        cfg.cxr_checkpoint = args.cxr_checkpoint.clone();
    }
    if let Some(s) = &args.store {
        cfg.store_path = s.clone();
    }
    if let Some(m) = args.max_upload_bytes {
        cfg.max_upload_bytes = m;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    tracing::info!(config = ?ServiceConfig { api_token: cfg.api_token.as_ref().map(|_| "<set>".into()), ..cfg.clone() }, "starting service");
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(covidscreen_service::serve(cfg))?;
    Ok(())
}
