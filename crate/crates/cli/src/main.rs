//! `pilotwave`: runs one experiment from a JSON config and writes its
//! artifacts plus a `run.json` record.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 when artifacts cannot be written.

mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use pilotwave::exec::Execution;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write artifacts: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "pilotwave", version, about = "Quantum relaxation experiments in pilot-wave theory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Backtracked density, coarse-grained H(t) and its decay fit.
    Relax(ConfigArg),
    /// Refit an existing hcurve.csv.
    Fit(ConfigArg),
    /// Variance deficit xi(k) over a wavenumber scan on expanding space.
    CosmoScan(ConfigArg),
    /// Angular power spectrum with and without the deficit.
    Cmb(ConfigArg),
    /// Cosmic-variance Monte Carlo over Gaussian skies.
    CosmicVariance(ConfigArg),
    /// Sampling under |Psi|^p product measures.
    Typicality(ConfigArg),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Relax(_) => "relax",
            Command::Fit(_) => "fit",
            Command::CosmoScan(_) => "cosmo-scan",
            Command::Cmb(_) => "cmb",
            Command::CosmicVariance(_) => "cosmic-variance",
            Command::Typicality(_) => "typicality",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let exec = Execution::default();
    let started = Instant::now();
    let outcome = match &cli.command {
        Command::Relax(a) => commands::relax(config::load(&a.config)?),
        Command::Fit(a) => commands::fit(config::load(&a.config)?),
        Command::CosmoScan(a) => commands::cosmo_scan(exec, config::load(&a.config)?),
        Command::Cmb(a) => commands::cmb(exec, config::load(&a.config)?),
        Command::CosmicVariance(a) => commands::cosmic_variance(exec, config::load(&a.config)?),
        Command::Typicality(a) => commands::typicality(exec, config::load(&a.config)?),
    }?;

    let dir = &outcome.output_dir;
    fs::create_dir_all(dir)?;
    for (name, bytes) in &outcome.files {
        fs::write(dir.join(name), bytes)?;
    }
    let record = json!({
        "subcommand": cli.command.name(),
        "seed": outcome.seed,
        "config": outcome.config,
        "versions": { "pilotwave": env!("CARGO_PKG_VERSION") },
        "threads": cli.threads.unwrap_or_else(rayon::current_num_threads),
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "artifacts": outcome.files.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
        "summary": outcome.summary,
    });
    let mut text = serde_json::to_vec_pretty(&record).expect("serializable");
    text.push(b'\n');
    fs::write(dir.join("run.json"), text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pilotwave: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
