use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covidscreen_core::data::Modality;
use covidscreen_core::nn::Task;
use covidscreen_core::preprocess::Mode;

#[derive(Debug, Parser)]
#[command(name = "covidscreen", version, about = "COVID-19 CT/CXR screening toolkit", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset manifests: scan, validate, split.
    #[command(subcommand)]
    Data(DataCommand),
    /// Run the preprocessing pipeline over a directory of images.
    Preprocess(PreprocessArgs),
    /// Train a CT or CXR model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split or an external dataset.
    Eval(EvalArgs),
    /// Classify images with a checkpoint.
    Predict(PredictArgs),
    /// Grad-CAM overlay for one image.
    Cam(CamArgs),
    /// ROC points and AUC from a `score label` text file.
    Roc(RocArgs),
    /// Start the HTTP screening service.
    Serve(ServeArgs),
    /// Write a randomly initialized checkpoint.
    InitCheckpoint(InitArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Build a manifest from a `<root>/<class>/<image>` tree.
    Scan(ScanArgs),
    /// Decode every image and check it against the dataset bounds.
    Validate(ValidateArgs),
    /// Assign train/val/test splits and write the manifest.
    Split(SplitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Ct,
    Cxr,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Ct => Modality::Ct,
            ModalityArg::Cxr => Modality::Cxr,
        }
    }
}

impl From<ModalityArg> for Task {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Ct => Task::Ct,
            ModalityArg::Cxr => Task::Cxr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Eval,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Train => Mode::Train,
            ModeArg::Eval => Mode::Eval,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    /// Dataset root; uses `<DIR>/manifest.csv` when present, else the class-directory layout.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Explicit manifest file (paths relative to its directory).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ct")]
    pub modality: ModalityArg,
    /// `raw=label` lines mapping an external vocabulary onto the three classes.
    #[arg(long, value_name = "FILE")]
    pub label_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Only require decodable images (default for CXR and external data).
    #[arg(long, conflicts_with = "strict")]
    pub lenient: bool,
    /// Enforce the CT size and bit-depth bounds (default for CT).
    #[arg(long)]
    pub strict: bool,
    /// Per-image CSV report.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// train,val,test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    pub ratios: String,
    /// Keep every patient inside one split (default for CT).
    #[arg(long, conflicts_with = "no_group_by_patient")]
    pub group_by_patient: bool,
    #[arg(long)]
    pub no_group_by_patient: bool,
    /// Extra records appended to the test split only (CXR protocol: 70/30 split, then the
    /// additional pneumonia images go to test).
    #[arg(long, value_name = "MANIFEST")]
    pub extra_test: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with preprocessing settings.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Square output size, overriding the config.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModalityArg,
    /// Run configuration (TOML); a `run_config.toml` from an earlier run works too.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from an epoch-boundary checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use the small network (CPU smoke runs).
    #[arg(long)]
    pub tiny: bool,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Report path; the JSON report, ROC points and scores are written next to it.
    #[arg(long, value_name = "OUT")]
    pub report: PathBuf,
    /// Split to score; ignored for external data given with --label-map.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Recorded in the run config; evaluation itself draws no randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Method name in the results table.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
    pub image: Vec<PathBuf>,
    /// JSON lines instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Also write the predictions as CSV.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Recorded only; prediction is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Class index or name (`covid`, `normal`, ...); defaults to the predicted class.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    /// Overlay image (format from the extension).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Raw grid heatmap in the tensor container.
    #[arg(long, value_name = "PATH")]
    pub heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service TOML; `COVIDSCREEN_*` variables and the flags below override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, value_name = "FILE")]
    pub ct_checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub cxr_checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub max_upload_bytes: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_enum)]
    pub model: ModalityArg,
    #[arg(long)]
    pub tiny: bool,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Constant auxiliary features instead of auxiliary checkpoints (CXR only).
    #[arg(long)]
    pub aux_stub: bool,
    #[arg(long, value_name = "FILE")]
    pub aux_chexpert: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub aux_pneumonia: Option<PathBuf>,
    /// DenseNet-121 weights (safetensors, torchvision names).
    #[arg(long, value_name = "FILE")]
    pub backbone_weights: Option<PathBuf>,
}
