//! Command-line front end: `train`, `bench` and `export-factors`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{LoadedConfig, RunConfig};

/// Exit code 1 for bad input (config, arguments, checkpoints), 2 for
/// failures during a run.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<mrtl_core::Error> for Failure {
    fn from(e: mrtl_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mrtl", version, about = "Multi-resolution tensor learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare methods by cost to a validation-loss threshold.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated methods, e.g. `fixed,entropy,mu_sigma`. Defaults
        /// to all of them unless `--sweep` or `--theory` is given.
        #[arg(long)]
        methods: Option<String>,
        /// Target validation loss. Defaults to the generator's loss plus
        /// 0.01 for synthetic data.
        #[arg(long)]
        threshold: Option<f64>,
        /// Runs seeds `0..N` per method.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also sweep the thresholds of this criterion.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long, default_value_t = 20)]
        draws: usize,
        /// Also run the iteration-count checks on the quadratic model.
        #[arg(long)]
        theory: bool,
    },
    /// Write factor CSVs and layout reports from a factored checkpoint.
    ExportFactors {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Thread count from `MRTL_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var("MRTL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Config(format!("MRTL_THREADS: expected a positive integer, got {v:?}"))),
        },
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Bench { config, methods, threshold, seeds, sweep, draws, theory } => {
            commands::bench(&config, &commands::BenchArgs { methods, threshold, seeds, sweep, draws, theory })
        }
        Command::ExportFactors { checkpoint, out } => commands::export_factors(&checkpoint, &out),
    }
}
