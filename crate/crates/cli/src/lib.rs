//! Command-line experiment runner: reads a JSON [`ExperimentConfig`], runs
//! one command and writes CSV tables with JSON mirrors, the resolved config
//! and a manifest into the output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Outcome};

#[derive(Debug, Parser)]
#[command(name = "rolling-lab", version, about = "Stochastic flows on nilpotent Lie groups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = automatic). Falls back to ROLLING_LAB_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate and export trajectories.
    Simulate,
    /// Derivative formula against the finite-difference oracle.
    VerifyDerivative,
    /// Cutoff convergence tables.
    CutoffStudy,
    /// Integration-by-parts battery.
    Ibp,
    /// Matrix route against the group route for the adjoint process.
    AdjointCrosscheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::VerifyDerivative => "verify-derivative",
            Command::CutoffStudy => "cutoff-study",
            Command::Ibp => "ibp",
            Command::AdjointCrosscheck => "adjoint-crosscheck",
        }
    }
}

/// Config file, then command-line overrides, then the thread fallback.
pub fn resolve_config(cli: &Cli, env_threads: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let threads = config::resolve_threads(cli.threads, env_threads)?;
    let overrides = Overrides {
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        out: cli.out.clone(),
        threads: (cli.threads.is_some() || env_threads.is_some()).then_some(threads),
    };
    Ok(base.apply(&overrides))
}

pub fn run_command(command: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} threads: {e}", cfg.threads)))?;
    pool.install(|| match command {
        Command::Simulate => commands::cmd_simulate(cfg),
        Command::VerifyDerivative => commands::cmd_verify_derivative(cfg),
        Command::CutoffStudy => commands::cmd_cutoff_study(cfg),
        Command::Ibp => commands::cmd_ibp(cfg),
        Command::AdjointCrosscheck => commands::cmd_adjoint_crosscheck(cfg),
    })
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli, env_threads: Option<&str>) -> i32 {
    let result = resolve_config(cli, env_threads).and_then(|cfg| run_command(cli.command, &cfg));
    match result {
        Ok(outcome) => {
            if outcome != Outcome::Pass {
                eprintln!("{}: checks failed (exit {})", cli.command.name(), outcome.code());
            }
            outcome.code()
        }
        Err(e) => {
            eprintln!("{}: {e}", cli.command.name());
            Outcome::from(&e).code()
        }
    }
}
