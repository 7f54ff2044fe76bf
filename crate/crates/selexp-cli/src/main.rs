//! Command-line pipeline for selective Shapley explanations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or mismatched
//! artifact, 4 numerical failure.

/// Print a user-facing line, tolerating a closed stdout (e.g. piped into
/// `head`): a broken pipe must not crash the pipeline stage.
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use selexp::data::SplitPart;
use std::path::PathBuf;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self {
            code: EXIT_CONFIG,
            message,
        }
    }

    pub fn missing(message: String) -> Self {
        Self {
            code: EXIT_MISSING,
            message,
        }
    }

    pub fn numerical(message: String) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message,
        }
    }
}

impl From<selexp::Error> for CliError {
    fn from(err: selexp::Error) -> Self {
        use selexp::Error as E;
        let code = match &err {
            E::NonFinite { .. }
            | E::NumericalFailure(_)
            | E::RankDeficientDesign
            | E::DegenerateBin => EXIT_NUMERICAL,
            E::MissingTarget(_) | E::DuplicateCacheKey { .. } | E::DigestMismatch { .. } => {
                EXIT_MISSING
            }
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            E::Io(_) | E::Json(_) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: err.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "selexp",
    about = "Selective Shapley explanations for black-box tabular classifiers",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, default_value = "selexp.toml")]
    config: PathBuf,

    /// Override the experiment seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Allow guarded operations (exact enumeration above the dimension guard).
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the black-box classifier and write the model artifact.
    TrainModel,
    /// Compute explanations for one split and append them to the cache.
    GenExplanations {
        /// exact | svs-M | ks-N
        #[arg(long)]
        method: String,
        /// train | cal | test
        #[arg(long)]
        split: String,
    },
    /// Train the amortized explainer from cached Monte Carlo targets.
    TrainAmortized,
    /// Fit the uncertainty metric, threshold, bins, and combination weights.
    FitSelective,
    /// Produce selective explanations for one split.
    Explain {
        /// train | cal | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Manifest path (defaults to <out>/manifest.json).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run one evaluation protocol and write its report.
    Evaluate {
        /// coverage | recourse | quantiles | perturbation | timeshare | ablation
        #[arg(long)]
        protocol: String,
        /// Manifest path (defaults to <out>/manifest.json).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<SplitPart, CliError> {
    s.parse::<SplitPart>()
        .map_err(|e| CliError::config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ws = pipeline::Workspace::load(&cli.config, cli.seed, cli.out, cli.force)?;
    match cli.command {
        Command::TrainModel => pipeline::cmd_train_model(&ws),
        Command::GenExplanations { method, split } => {
            pipeline::cmd_gen_explanations(&ws, &method, parse_split(&split)?)
        }
        Command::TrainAmortized => pipeline::cmd_train_amortized(&ws),
        Command::FitSelective => pipeline::cmd_fit_selective(&ws),
        Command::Explain { split, manifest } => {
            let manifest = manifest.unwrap_or_else(|| ws.manifest_path());
            pipeline::cmd_explain(&ws, parse_split(&split)?, &manifest)
        }
        Command::Evaluate { protocol, manifest } => {
            let manifest = manifest.unwrap_or_else(|| ws.manifest_path());
            pipeline::cmd_evaluate(&ws, &protocol, &manifest)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        use std::io::Write as _;
        let _ = writeln!(std::io::stderr(), "error: {}", err.message);
        std::process::exit(err.code);
    }
}
