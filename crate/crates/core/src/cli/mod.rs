//! Command-line interface: `ingest`, `train`, `eval`, `ablate`, `gradcheck`.
//!
//! Every command accepts `--config <json>`; flags given on the command line
//! override values from the file. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{ablate_rows, split_hash, AblationRow, Variant, ABLATION_COLUMNS};
pub use config::{RunConfig, Seeds};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Maps an error to the process exit code for its category.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownColumn(_) => EXIT_USAGE,
        Error::NonFiniteProbe { .. }
        | Error::NonFiniteGradient(_)
        | Error::NonFiniteLoss { .. }
        | Error::CacheConsumed => EXIT_NUMERIC,
        Error::Shape { .. }
        | Error::ZeekHeader { .. }
        | Error::NoBenignClass
        | Error::Sampling(_)
        | Error::ClassOutOfRange { .. }
        | Error::Format(_)
        | Error::Checksum(_)
        | Error::Version { .. }
        | Error::Incompatible(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_) => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ecnet",
    version,
    about = "Attention-based recurrent classifier for network flow logs"
)]
pub struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse Zeek conn logs, sample, split, and write canonical CSVs.
    Ingest(IngestArgs),
    /// Train a model on an ingest directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled flows.
    Eval(EvalArgs),
    /// Train and evaluate a grid of model variants on shared data.
    Ablate(AblateArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Zeek conn.log(.labeled) files.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Total record budget for stratified sampling (default: keep everything).
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub seed_sample: Option<u64>,
    /// Share of each class that goes to the training split.
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Feature, model and optimization flags shared by `train` and `ablate`.
#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub hidden_numeric: Option<usize>,
    #[arg(long)]
    pub hidden_categorical: Option<usize>,
    #[arg(long)]
    pub d_k: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Hidden widths of the fully connected head, e.g. `64,32` (empty for none).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub fc_sizes: Option<Vec<usize>>,
    /// `final` or `mean`.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Early-stopping patience in epochs (needs a validation set).
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed_init: Option<u64>,
    #[arg(long)]
    pub seed_train: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ingest output directory (train.csv and vocab.json).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory for the checkpoint and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `lstm`, `rnn` or `gru`.
    #[arg(long)]
    pub cell: Option<String>,
    #[arg(long, overrides_with = "no_attention")]
    pub attention: bool,
    #[arg(long, overrides_with = "attention")]
    pub no_attention: bool,
    /// `separate` or `merged`.
    #[arg(long)]
    pub feature_mode: Option<String>,
    /// Trailing share of training records held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub record_time: bool,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Ingest directory (uses test.csv) or a canonical flow CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Collapse classes into Benign/Malicious before scoring.
    #[arg(long)]
    pub binary: bool,
    /// Report path (JSON). Printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub record_time: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ingest output directory (train.csv, test.csv, vocab.json).
    #[arg(long, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Use a generated task instead: `sign` or `salient`.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Number of generated sequences.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// Probability of flipping each generated label.
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    /// Cells to compare (default: all three).
    #[arg(long, value_delimiter = ',')]
    pub cells: Option<Vec<String>>,
    /// Attention settings to compare, e.g. `on,off` (default: both).
    #[arg(long, value_delimiter = ',')]
    pub attention_modes: Option<Vec<String>>,
    /// Feature modes to compare (default: the configured one).
    #[arg(long, value_delimiter = ',')]
    pub feature_modes: Option<Vec<String>>,
    /// Seeds; each sets both the init and the shuffle seed (default: configured init seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Data split seed (synthetic generation and train/test partition).
    #[arg(long)]
    pub seed_sample: Option<u64>,
    /// Results CSV path. Printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = crate::gradcheck_suite::DEFAULT_SEED)]
    pub seed: u64,
    /// Write the per-component results as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negate one analytic gradient to confirm the check can fail.
    #[arg(long, hide = true)]
    pub inject_sign_error: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Ingest(a) => commands::ingest(base, a),
        Command::Train(a) => commands::train(base, a),
        Command::Eval(a) => commands::eval(base, a),
        Command::Ablate(a) => commands::ablate(base, a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}
