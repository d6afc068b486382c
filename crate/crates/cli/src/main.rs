//! Experiment driver for the smcda toolkit: parses a JSON config, runs one
//! algorithm on simulated or file-based data, and writes CSV results plus a
//! JSON summary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime algorithm
//! failure.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "smcda",
    about = "Particle filtering, ensemble Kalman filtering, smoothing, and \
             particle MCMC on state-space models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config; default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps the worker thread count; results are identical for any value.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a ground-truth trajectory and observations.
    Simulate(RunArgs),
    /// Run a particle filter (bootstrap, SIS, or auxiliary).
    Filter(RunArgs),
    /// Run a particle smoother over a stored filter pass.
    Smooth(RunArgs),
    /// Run an ensemble Kalman filter assimilation loop.
    Enkf(RunArgs),
    /// Particle marginal Metropolis-Hastings.
    Pmmh(RunArgs),
    /// Particle Gibbs with conditional particle filter path updates.
    Pgibbs(RunArgs),
    /// Estimate Var(log L-hat) and recommend a particle count.
    #[command(name = "tune-n")]
    TuneN(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, runner): (&RunArgs, fn(&run::RunContext) -> Result<(), CliError>) =
        match &cli.command {
            Command::Simulate(a) => (a, run::run_simulate),
            Command::Filter(a) => (a, run::run_filter),
            Command::Smooth(a) => (a, run::run_smooth),
            Command::Enkf(a) => (a, run::run_enkf_cmd),
            Command::Pmmh(a) => (a, run::run_pmmh_cmd),
            Command::Pgibbs(a) => (a, run::run_pgibbs_cmd),
            Command::TuneN(a) => (a, run::run_tune_n),
        };
    match execute(args, runner) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn execute(
    args: &RunArgs,
    runner: fn(&run::RunContext) -> Result<(), CliError>,
) -> Result<(), CliError> {
    if let Some(k) = args.threads {
        if k == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        // Ignore the error if a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let mut config = config::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| config.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = run::RunContext { config, out_dir };
    runner(&ctx)
}
