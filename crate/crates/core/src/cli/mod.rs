//! Command-line entry point: phantom generation, preprocessing, training,
//! evaluation, population analyses and cross-arm reports.
//!
//! Every command writes `manifest.json` into its output directory before doing
//! any work and finalises it after `results.json`. Results hold no timestamps
//! or paths, so identical configs and seeds give byte-identical results.
//! Failures print `{"error": {"code", "kind", "message"}}` to stderr.

mod analysis;
mod evaluate;
mod pipeline;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

pub use analysis::{ArmSummary, Comparison, MetricSummary, ReportResults};
pub use evaluate::{EvalResults, SubjectMetrics};
pub use pipeline::{FinetuneRunConfig, GridConfig, PhantomSetConfig, PretrainRunConfig, SplitConfig, Variation};
pub use run::{RunManifest, RunStatus};

/// Exit status of a successful command.
pub const EXIT_OK: i32 = 0;
/// Unknown subcommand, flag or malformed arguments.
pub const EXIT_USAGE: i32 = 64;
/// Invalid or unreadable configuration.
pub const EXIT_CONFIG: i32 = 65;
/// Any failure while running.
pub const EXIT_RUNTIME: i32 = 70;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> String {
        json!({"error": {"code": self.code(), "kind": self.kind(), "message": self.to_string()}}).to_string()
    }
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "cinema", version, about = "Multi-view masked autoencoder for cine cardiac MR")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom studies.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Dataset preparation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Pre-training and fine-tuning.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Score fine-tuning predictions against ground truth.
    Eval(EvalArgs),
    /// Population analyses of per-subject records.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Bootstrap summaries and significance tiers across evaluated arms.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    /// Generate a set of phantom studies.
    Generate(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom set config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Resample, crop and normalise every study of a directory.
    Preprocess(PreprocessArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target grid config (JSON).
    #[arg(long)]
    pub grid: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Masked-autoencoder pre-training.
    Pretrain(PretrainArgs),
    /// Fine-tune a task model, once per seed.
    Finetune(FinetuneArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a pre-training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs of this invocation.
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pre-training checkpoint; required by the fine-tune arm.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fine-tuning run directory, or a directory of prediction containers.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth studies.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Linear association of a metric with disease, adjusted for age, sex and BMI.
    Assoc(AnalyzeArgs),
    /// Cox model of mortality on a metric, adjusted for age, sex and BMI.
    Survival(AnalyzeArgs),
    /// White to non-White positive-rate ratios over threshold percentiles.
    Disparity(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Subject records (CSV).
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub metric: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation output directories, one or more per arm.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to these metrics (default: every metric shared by all arms).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
}

/// Parse `argv` (including the program name), run the command and return the
/// exit code. Help and version go to stdout, errors to stderr as JSON.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.code();
        }
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code()
        }
    }
}

/// Run a parsed command. `argv` is recorded in the manifest.
pub fn execute(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom(PhantomCommand::Generate(a)) => pipeline::phantom_generate(&a, argv),
        Command::Data(DataCommand::Preprocess(a)) => pipeline::data_preprocess(&a, argv),
        Command::Train(TrainCommand::Pretrain(a)) => pipeline::train_pretrain(&a, argv),
        Command::Train(TrainCommand::Finetune(a)) => pipeline::train_finetune(&a, argv),
        Command::Eval(a) => evaluate::eval(&a, argv),
        Command::Analyze(c) => analysis::analyze(c, argv),
        Command::Report(a) => analysis::report(&a, argv),
    }
}
