//! `orbm`: command-line driver for the reflected-diffusion experiments.
//!
//! Exit codes: 0 success, 1 configuration error, 2 a checked condition
//! failed, 3 numerical failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "orbm", version, about = "Reflected Brownian motion in the bandwidth-sharing cone")]
struct Cli {
    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Check the boundary condition and the Lyapunov inequalities.
    CheckConditions,
    /// Simulate paths to a sphere and record first passage times.
    SimulateOrbm,
    /// Mean exit time from the vertex against its bound.
    ExitTime,
    /// Probability of approaching the vertex against the power-law bound.
    SurvivalBound,
    /// Estimate killed kernels and compare hitting distributions.
    HittingUniqueness,
    /// Normalized limits of a kernel sequence.
    ErgodicDemo,
    /// Simulate the scaled workload of the network.
    Prelimit,
    /// Tabulate network statistics next to the diffusion's.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::CheckConditions => "check-conditions",
            Command::SimulateOrbm => "simulate-orbm",
            Command::ExitTime => "exit-time",
            Command::SurvivalBound => "survival-bound",
            Command::HittingUniqueness => "hitting-uniqueness",
            Command::ErgodicDemo => "ergodic-demo",
            Command::Prelimit => "prelimit",
            Command::Compare => "compare",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    wall_time_s: f64,
    conditions_hold: bool,
    config: &'a config::ExperimentConfig,
    files: Vec<FileEntry>,
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let start = Instant::now();
    let cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => return Err(CliError::Config("--config is required".into())),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().and_then(|o| o.dir.as_ref()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    if threads == 0 {
        return Err(CliError::Config("--threads must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let base = cli.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(".")).to_path_buf();
    let outcome = pool.install(|| match cli.cmd {
        Command::CheckConditions => commands::check_conditions(&cfg, seed),
        Command::SimulateOrbm => commands::simulate_orbm(&cfg, seed),
        Command::ExitTime => commands::exit_time(&cfg, seed),
        Command::SurvivalBound => commands::survival_bound(&cfg, seed),
        Command::HittingUniqueness => commands::hitting_uniqueness(&cfg, seed),
        Command::ErgodicDemo => commands::ergodic_demo(&cfg, &base),
        Command::Prelimit => commands::prelimit(&cfg, seed),
        Command::Compare => commands::compare(&cfg, seed),
    })?;

    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut files = Vec::new();
    for (name, bytes) in &outcome.files {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        files.push(FileEntry {
            name: name.clone(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }
    let manifest = Manifest {
        subcommand: cli.cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        threads,
        wall_time_s: start.elapsed().as_secs_f64(),
        conditions_hold: outcome.conditions_hold,
        config: &cfg,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), json).map_err(|e| CliError::Io(e.to_string()))?;
    print!("{}", outcome.summary);
    if let Some(f) = outcome.numerical_failure {
        return Err(CliError::Numerical(f));
    }
    Ok(outcome.conditions_hold)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("orbm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
