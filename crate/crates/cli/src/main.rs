//! `ammsm`: synthetic data, leave-one-subject-out training runs, checkpoint
//! evaluation and FLOP/latency benchmarks, all driven by one JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or missing inputs; exit code 2.
    Config(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl From<ammsm_core::Error> for CliError {
    fn from(e: ammsm_core::Error) -> Self {
        if let ammsm_core::Error::Config(m) = &e {
            CliError::Config(m.clone())
        } else if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "ammsm", version, about = "Micro-expression recognition with adaptive magnification and sparse SSD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=3`. Values are parsed as
    /// JSON and fall back to plain strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the config's dataset directory.
    Synth(Common),
    /// Leave-one-subject-out training, search and evaluation.
    Run(Common),
    /// FLOP counts and forward latency, dense against sparse.
    Bench(Common),
    /// Evaluate a saved checkpoint on the config's dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = (|| {
        match &cli.command {
            Command::Synth(c) => commands::synth(&RunConfig::load(c.config.as_deref(), &c.set)?),
            Command::Run(c) => commands::run(&RunConfig::load(c.config.as_deref(), &c.set)?),
            Command::Bench(c) => commands::bench(&RunConfig::load(c.config.as_deref(), &c.set)?),
            Command::Eval { common, checkpoint } => {
                commands::eval(&RunConfig::load(common.config.as_deref(), &common.set)?, checkpoint)
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
