//! `btlab`: reproducible experiments on free-boundary p-harmonic maps.
//!
//! Exit status is 0 on success, 2 when an extraction hits its generation cap
//! (INCOMPLETE), and 1 on any error.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use config::{Config, Kind};

#[derive(Debug, Parser)]
#[command(name = "btlab", version, about = "Free-boundary p-harmonic map experiments")]
struct Cli {
    #[arg(value_enum)]
    experiment: Kind,
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for ChaCha8; overrides the config `seed` (default 0).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for sweeps and trials (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("INCOMPLETE");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli.out.clone().or(cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().context("building worker pool")?;
    pool.install(|| run::run(cli.experiment, &cfg, seed, &out))
}
