//! Configuration, artifact cache and subcommands of the `merton-impact`
//! binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use merton_impact::Error;

pub use config::RunConfig;

/// Exit code for a run whose checks all passed.
pub const EXIT_PASS: u8 = 0;
/// Exit code for a failed check or a runtime error.
pub const EXIT_FAIL: u8 = 1;
/// Exit code for an unreadable or invalid configuration.
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn config(e: Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Parameter-shaped library errors count as configuration errors.
    pub fn from_core(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_)
            | Error::SingularCovariance { .. }
            | Error::NotSpd(_)
            | Error::DegenerateNu { .. }
            | Error::GDomain { .. }
            | Error::NonPositiveWealth(_)
            | Error::NonPositivePrice { .. }
            | Error::DimensionMismatch { .. }
            | Error::NonPositiveDiagonal { .. }
            | Error::InvalidStudy(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_FAIL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "merton-impact", version, about = "Small price-impact asymptotics for the Merton problem")]
pub struct Cli {
    /// TOML or JSON run configuration; the d=2 benchmark when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Comma-separated impact scales; `simulate` uses the first one.
    #[arg(long, global = true, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Write per-path CSV traces (`simulate`).
    #[arg(long, global = true)]
    pub trace: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Solve (or load) the 1-D corrector and print the factorization constants.
    SolveCorrector,
    /// Residual, duality and Feynman–Kac checks; ε-independent.
    Verify,
    /// Simulate the candidate strategy at one ε.
    Simulate,
    /// Convergence study over the ε-grid.
    Converge,
}

impl Cli {
    /// Loads the configuration and applies the command-line overrides.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::benchmark(),
        };
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
            cfg.verify.seed = seed;
        }
        if let Some(n) = self.paths {
            cfg.sim.n_paths = n;
        }
        if let Some(eps) = &self.eps {
            if let Some(first) = eps.first() {
                cfg.sim.epsilon = *first;
            }
            cfg.validator.eps_grid = eps.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> u8 {
    let outcome = cli.resolve_config().and_then(|cfg| match cli.command {
        Command::SolveCorrector => commands::solve_corrector(&cfg),
        Command::Verify => commands::verify(&cfg),
        Command::Simulate => commands::simulate(&cfg, cli.trace),
        Command::Converge => commands::converge(&cfg),
    });
    match outcome {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_FAIL,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
