//! `tiltcal` command-line driver.
//!
//! Exit status: 0 success, 1 other failure, 2 parse or validation error,
//! 3 infeasible balancing targets, 4 no convergence, 5 file system error.

mod commands;
mod error;
mod manifest;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, Status};
use manifest::Overrides;

#[derive(Parser)]
#[command(name = "tiltcal", version, about = "Calibrate a patient-level generative model to published trial statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run manifest (TOML).
    #[arg(long, global = true, default_value = "tiltcal.toml")]
    manifest: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the manifest output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Parse and validate inputs without running anything.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1 and Stage 2 for every trial in the manifest.
    Calibrate,
    /// Rebalance the source arm onto the target population and compare.
    Contrast,
    /// Pseudo-IPD bootstrap envelopes around the contrast.
    Bootstrap,
    /// Weight and sampler diagnostics of a finished run.
    Diagnose,
    /// Draw baseline records and outcomes from the model.
    Simulate {
        /// Number of draws.
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
}

fn run(cli: &Cli) -> Result<Status, CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::parse("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(Status::Other, e.to_string()))?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        output: cli.output.clone(),
    };
    let loaded = manifest::load(&cli.manifest, &overrides)?;
    if cli.dry_run {
        return commands::dry_run(&loaded);
    }
    match &cli.command {
        Command::Calibrate => commands::calibrate(&loaded),
        Command::Contrast => commands::contrast(&loaded),
        Command::Bootstrap => commands::bootstrap(&loaded),
        Command::Diagnose => commands::diagnose(&loaded),
        Command::Simulate { count } => commands::simulate(&loaded, *count),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(status) => status.into(),
        Err(e) => {
            eprintln!("error: {e}");
            e.status.into()
        }
    }
}
