//! Config-driven batch front end for `fracsch`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_invert, cmd_measure, cmd_runge, cmd_spectrum, cmd_verify, Outcome, Run};
pub use config::{ExperimentConfig, Loaded};

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration.
    Config(String),
    /// Error raised by the toolkit.
    Core(fracsch::Error),
    /// Output could not be written.
    Output(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Output(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fracsch::Error> for CliError {
    fn from(e: fracsch::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 1 for numerical failures, 2 for bad configuration or input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(fracsch::Error::Factorization { .. } | fracsch::Error::Residual { .. }) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the spectral identities; writes verify_report.json.
    Verify,
    /// Simulate measurement bundles for the configured potentials.
    Measure,
    /// Run the Runge density sweep; writes runge_sweep.csv.
    Runge,
    /// Recover a potential from bundle files.
    Invert,
    /// Build and export the spectrum (and the UCP margin table).
    Spectrum,
}

#[derive(Debug, Parser)]
#[command(
    name = "fracsch",
    version,
    about = "Fractional Schrödinger toolkit on closed manifolds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Run one subcommand in-process.
pub fn execute(command: Command, run: &Run) -> Result<Outcome, CliError> {
    match command {
        Command::Verify => cmd_verify(run),
        Command::Measure => cmd_measure(run),
        Command::Runge => cmd_runge(run),
        Command::Invert => cmd_invert(run),
        Command::Spectrum => cmd_spectrum(run),
    }
}

/// Parse-to-exit-code driver used by the binary.
pub fn main_with(cli: Cli) -> i32 {
    let Some(config) = cli.config else {
        eprintln!("error: --config PATH is required");
        return 2;
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let loaded = match Loaded::from_file(&config) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let run = Run::new(loaded, cli.out, cli.seed);
    match execute(cli.command, &run) {
        Ok(o) => {
            println!("{}", o.summary);
            o.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
