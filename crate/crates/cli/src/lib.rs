//! The `endovid` command line: pre-training, gradient checks, linear probes,
//! dataset generation and metrics export.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ConfigArgs, Preset, RunConfig, TrainArgs};

/// Exit status of a command.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config { field: String, reason: String },
    Runtime(endovid_core::Error),
    /// A check ran and did not pass.
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config { field, reason } => write!(f, "invalid config field `{field}`: {reason}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<endovid_core::Error> for CliError {
    fn from(e: endovid_core::Error) -> Self {
        match e {
            endovid_core::Error::Config { field, reason } => CliError::Config { field, reason },
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Runtime(_) | CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "endovid", version, about = "Self-supervised pre-training for endoscopy video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Teacher-student pre-training on a dataset directory.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients in 64-bit.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = endovid_core::check::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<commands::FaultArg>,
    },
    /// Linear probe of a frozen backbone on a labelled dataset.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Labelled dataset directory (overrides `data.root`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-trained checkpoint.
        #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Use a randomly initialised backbone of the configured architecture.
        #[arg(long)]
        random_init: bool,
        /// Which network of the checkpoint to probe.
        #[arg(long, value_enum, default_value = "teacher")]
        backbone: commands::BackboneArg,
        /// Train the backbone together with the classifier.
        #[arg(long)]
        unfreeze: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset, or slice a frame sequence into clips.
    MakeData(commands::MakeDataArgs),
    /// Summarise the metrics of a run directory.
    ExportMetrics {
        /// Run directory containing `metrics.csv`.
        #[arg(long)]
        run: PathBuf,
        /// Steps in the first and last averaging windows.
        #[arg(long, default_value_t = 20)]
        window: usize,
    },
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
