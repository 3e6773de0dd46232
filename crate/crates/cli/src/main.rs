//! Operator entry points for the decision pipeline: committee collection,
//! student distillation, closed-loop evaluation, few-shot sweeps, and
//! single-context inference.

mod collect;
mod config;
mod eval;
mod infer;
mod manifest;
mod sweep;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use confdrive::desk;
use confdrive::gateway::{BackendKind, RemoteBackend, TextBackend};

use crate::config::Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Remote,
    Scripted,
}

#[derive(Debug, Parser)]
#[command(
    name = "confdrive",
    version,
    about = "Confidence-weighted driving decisions: collect a committee memory \
bank, distill it into a fast student, and evaluate closed loop"
)]
pub struct Cli {
    /// Master seed; every stage derives its randomness from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// TOML configuration document; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Text backend for committee and embedding calls.
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendChoice>,

    /// Directory receiving artifacts and run manifests.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the committee over a scenario suite and grow a memory bank.
    Collect(collect::CollectArgs),
    /// Distill a memory bank into a student checkpoint.
    Train(train::TrainArgs),
    /// Closed-loop evaluation of a decision source over a scenario suite.
    Eval(eval::EvalArgs),
    /// Measure accuracy, KL, and latency as the few-shot count varies.
    SweepFewshot(sweep::SweepArgs),
    /// Decide once for a single context file and show the full audit.
    Infer(infer::InferArgs),
}

/// Failures mapped to process exit codes: usage 1, runtime 2, threshold 3.
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Runtime(anyhow::Error),
    Threshold(String),
}

impl From<anyhow::Error> for CmdError {
    fn from(e: anyhow::Error) -> CmdError {
        CmdError::Runtime(e)
    }
}

pub type CmdResult = Result<(), CmdError>;

/// The configured backend, with the scripted kind bound to the desk committee
/// so offline runs exercise the whole pipeline.
pub fn build_backend(config: &Config, seed: u64) -> Result<Box<dyn TextBackend>, CmdError> {
    match config.backend.kind {
        BackendKind::Scripted => {
            Ok(Box::new(desk::committee_backend(config.backend.embed_dimension, seed)))
        }
        BackendKind::Remote => {
            let remote = RemoteBackend::new(config.backend.clone())
                .map_err(|e| CmdError::Runtime(anyhow::anyhow!("remote backend: {e}")))?;
            Ok(Box::new(remote))
        }
    }
}

fn effective_config(cli: &Cli) -> Result<Config, CmdError> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).map_err(CmdError::Runtime)?,
        None => Config::default(),
    };
    if let Some(choice) = cli.backend {
        config.backend.kind = match choice {
            BackendChoice::Remote => BackendKind::Remote,
            BackendChoice::Scripted => BackendKind::Scripted,
        };
    }
    Ok(config)
}

fn dispatch(cli: &Cli, config: &Config) -> CmdResult {
    match &cli.command {
        Command::Collect(args) => collect::run(cli, config, args),
        Command::Train(args) => train::run(cli, config, args),
        Command::Eval(args) => eval::run(cli, config, args),
        Command::SweepFewshot(args) => sweep::run(cli, config, args),
        Command::Infer(args) => infer::run(cli, config, args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code: u8 = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let config = match effective_config(&cli) {
        Ok(config) => config,
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
        Err(_) => unreachable!("config loading only fails at runtime"),
    };
    match dispatch(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CmdError::Threshold(msg)) => {
            eprintln!("threshold not met: {msg}");
            ExitCode::from(3)
        }
    }
}
