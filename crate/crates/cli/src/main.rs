//! `fpf`: dataset preparation, training, evaluation and activation maps for
//! altered-fingerprint classification.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fpforensics::alteration::AlterationError;
use fpforensics::dataset::{DatasetError, SplitPart};
use fpforensics::evaluation::EvalError;
use fpforensics::explain::ExplainError;
use fpforensics::nn::{NetworkError, ScalePreset};
use fpforensics::training::TrainError;
use fpforensics::Task;

#[derive(Parser, Debug)]
#[command(name = "fpf", version, about = "Altered-fingerprint detection and attribute classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for loading and batch computation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Compute in 64-bit floats.
    #[arg(long, global = true)]
    pub fp64: bool,
    /// Suppress progress output on standard error.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan an image tree and write a manifest.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset with ground-truth alteration masks.
    Synth(SynthArgs),
    /// Apply one alteration to an image.
    Alter(AlterArgs),
    /// Partition a manifest into train / val / test.
    Split(SplitArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Retrain only one task head on a frozen backbone.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a split, or score a confusion matrix offline.
    Eval(EvalArgs),
    /// Render evaluation reports as markdown tables.
    Report(ReportArgs),
    /// Write a Grad-CAM overlay and raw heatmap for one image.
    Cam(CamArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SchemeArg {
    Socofing,
    Explicit,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, value_enum, default_value = "socofing")]
    pub scheme: SchemeArg,
    /// Manifest JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub subjects: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    #[value(alias = "obl")]
    Obliteration,
    #[value(alias = "cr", alias = "central-rotation")]
    Rotation,
    #[value(alias = "z-cut")]
    Zcut,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SeverityArg {
    Easy,
    Medium,
    Hard,
}

#[derive(Args, Debug)]
pub struct AlterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "type", value_enum)]
    pub kind: KindArg,
    #[arg(long, value_enum)]
    pub severity: SeverityArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    /// Override the severity's magnitude (fraction, degrees or half-size).
    #[arg(long)]
    pub magnitude: Option<f64>,
    /// Z-cut: leave the scar undrawn.
    #[arg(long)]
    pub no_seam: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub train: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val: f64,
    #[arg(long, default_value_t = 0.3)]
    pub test: f64,
    /// Keep all images of a subject in the same part.
    #[arg(long)]
    pub by_subject: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BalanceArg {
    None,
    Undersample,
}

#[derive(Args, Debug)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value = "none")]
    pub balance: BalanceArg,
    /// Use only unaltered prints.
    #[arg(long)]
    pub real_only: bool,
    /// Training report JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also save the best-validation model here.
    #[arg(long)]
    pub best_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value = "alteration")]
    pub task: Task,
    #[arg(long, default_value = "toy")]
    pub preset: ScalePreset,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long, required_unless_present = "matrix_in")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "matrix_in")]
    pub manifest: Option<PathBuf>,
    #[arg(long, conflicts_with = "matrix_in")]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub part: SplitPart,
    /// Evaluate only unaltered prints.
    #[arg(long)]
    pub real_only: bool,
    /// Score a confusion matrix JSON (rows actual, columns predicted) instead
    /// of running a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub matrix_in: Option<PathBuf>,
    /// Report JSON destination (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Markdown destination (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub task: Task,
    /// Class to explain (default: the predicted class).
    #[arg(long)]
    pub class: Option<usize>,
    /// Feature map to use (default: the backbone's last).
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Bad flag combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn network_code(e: &NetworkError) -> Option<u8> {
    matches!(e, NetworkError::MissingHead(_)).then_some(4)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let code = if cause.is::<UsageError>() {
            Some(64)
        } else if let Some(e) = cause.downcast_ref::<DatasetError>() {
            matches!(e, DatasetError::EmptyDataset(_)).then_some(2)
        } else if let Some(e) = cause.downcast_ref::<AlterationError>() {
            e.is_geometry().then_some(3)
        } else if let Some(e) = cause.downcast_ref::<NetworkError>() {
            network_code(e)
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::MissingCheckpoint(_) => Some(4),
                TrainError::EmptySplit(_) => Some(5),
                TrainError::Network(n) => network_code(n),
                _ => None,
            }
        } else if let Some(e) = cause.downcast_ref::<EvalError>() {
            match e {
                EvalError::EmptySplit(_) => Some(5),
                EvalError::Network(n) => network_code(n),
                _ => None,
            }
        } else if let Some(ExplainError::Network(n)) = cause.downcast_ref::<ExplainError>() {
            network_code(n)
        } else {
            None
        };
        if let Some(code) = code {
            return code;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) { 0 } else { 64 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(g, a),
        Command::Synth(a) => commands::synth(g, a),
        Command::Alter(a) => commands::alter(g, a),
        Command::Split(a) => commands::split(g, a),
        Command::Train(a) if g.fp64 => commands::train::<f64>(g, a),
        Command::Train(a) => commands::train::<f32>(g, a),
        Command::Finetune(a) if g.fp64 => commands::finetune::<f64>(g, a),
        Command::Finetune(a) => commands::finetune::<f32>(g, a),
        Command::Eval(a) if g.fp64 => commands::eval::<f64>(g, a),
        Command::Eval(a) => commands::eval::<f32>(g, a),
        Command::Report(a) => commands::report(a),
        Command::Cam(a) if g.fp64 => commands::cam::<f64>(g, a),
        Command::Cam(a) => commands::cam::<f32>(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
