mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use fewiter::data::DataError;
use fewiter::error::{Error, ErrorKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e.kind() {
            ErrorKind::Config => CliError::Config(msg),
            ErrorKind::Numeric => CliError::Numeric(msg),
            ErrorKind::Io => CliError::Io(msg),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Error::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fewiter", version, about = "Few-iteration meta-learning for few-shot classification")]
pub struct Cli {
    /// Run configuration (TOML). Defaults to the built-in desk benchmark.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores); overrides the config file.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the config file.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train a model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on sampled episodes.
    Eval(EvalArgs),
    /// Train and test every rung of an ablation ladder.
    Ablate,
    /// Accuracy as a function of the number of inner iterations.
    Sweep(SweepArgs),
    /// Per-query class probabilities with and without the entropy term.
    Confidence(ConfidenceArgs),
    /// Run the numerical verification suite.
    Gradcheck,
    /// Write the configured task family to an FSDT dataset file.
    Datagen(DatagenArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Continue training from this checkpoint.
    #[arg(long, conflicts_with = "finetune")]
    resume: Option<PathBuf>,
    /// Fine-tune ψ of this checkpoint at `meta.shots` instead of training.
    #[arg(long)]
    finetune: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Episode stream seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepModeArg {
    Eval,
    Train,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    mode: Option<SweepModeArg>,
    /// Comma-separated iteration counts, e.g. "0,3,6".
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Model for the eval-side sweep; trained from the config when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Debug, Args)]
struct ConfidenceArgs {
    /// Model to inspect; trained from the config when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Debug, Args)]
struct DatagenArgs {
    /// Destination file.
    #[arg(long)]
    path: PathBuf,
    /// Examples drawn per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fewiter: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
