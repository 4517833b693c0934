mod commands;
mod failure;
mod model;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use crate::failure::Failure;

/// Koopman-structured GP forecasting: simulate corpora, fit and query models,
/// and run the benchmark, information-gain and ablation studies.
///
/// Every command reads one JSON config and writes its outputs plus a
/// `manifest.json` of SHA-256 hashes into the output directory.
#[derive(Debug, Parser)]
#[command(name = "koopgp", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON configuration for the command.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "koopgp-out")]
    out: PathBuf,
    /// Log progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    Fit,
    Forecast,
    Benchmark,
    Infogain,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Forecast => "forecast",
            Command::Benchmark => "benchmark",
            Command::Infogain => "infogain",
            Command::Ablate => "ablate",
        }
    }
}

/// Caps the rayon pool when `KOOPGP_THREADS` is set.
fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("KOOPGP_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::Config(format!("KOOPGP_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = configure_threads().and_then(|()| commands::run(cli.command, &cli.config, &cli.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("koopgp {}: {failure}", cli.command.name());
            ExitCode::from(failure.exit_code())
        }
    }
}
