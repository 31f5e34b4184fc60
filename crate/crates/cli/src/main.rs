//! `unida` command-line harness.

mod commands;
mod config;
mod error;
mod manifest;
mod space;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Context;
use config::{config_hash, ExperimentConfig};
use error::{CliError, CliResult};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "UNIDA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "unida", version, about = "Diffusion and classical data assimilation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate ground-truth trajectories.
    Generate(Common),
    /// Draw noisy observations of the truth trajectory.
    Observe(Common),
    /// Run the configured assimilation method.
    Assimilate(Common),
    /// Fit an affine denoiser on the training trajectories.
    Train(Common),
    /// Unguided ensemble forecast from clean context frames.
    Forecast(Common),
    /// Score analyses and forecasts against the truth.
    Evaluate(Common),
    /// Write a scheduling matrix as CSV.
    ScheduleDump(Common),
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("cannot start {n} threads: {e}")))
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    init_threads()?;
    let (name, common, f): (&str, &Common, fn(&Context) -> CliResult<PathBuf>) = match &cli.command {
        Command::Generate(c) => ("generate", c, commands::generate),
        Command::Observe(c) => ("observe", c, commands::observe),
        Command::Assimilate(c) => ("assimilate", c, commands::assimilate),
        Command::Train(c) => ("train", c, commands::train),
        Command::Forecast(c) => ("forecast", c, commands::cmd_forecast),
        Command::Evaluate(c) => ("evaluate", c, commands::evaluate),
        Command::ScheduleDump(c) => ("schedule-dump", c, commands::schedule_dump),
    };
    let (cfg, value) = ExperimentConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Context { cfg, out, seed, config_hash: config_hash(&value) };
    let manifest = f(&ctx)?;
    println!("{}", serde_json::json!({ "command": name, "manifest": manifest }));
    Ok(manifest)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code.clamp(1, 255) as u8)
        }
    }
}
