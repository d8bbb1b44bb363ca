//! Command-line entry point for runs, parameter sweeps, and self-checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use meha::cli;

#[derive(Parser)]
#[command(name = "meha", version, about = "Single-loop Hessian-free bilevel solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write trace.csv plus manifest.json.
    Run {
        /// Flat JSON configuration file.
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand list-valued keys into a cross product and run all combinations.
    Sweep {
        /// Flat JSON configuration file; list values define sweep axes.
        config: PathBuf,
        /// Output directory; one subdirectory per run.
        #[arg(long)]
        out: PathBuf,
        /// Maximum concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the built-in verification battery.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out } => cli::cmd_run(&config, &out),
        Command::Sweep { config, out, jobs } => cli::cmd_sweep(&config, &out, jobs),
        Command::Check => cli::cmd_check(),
    };
    ExitCode::from(code as u8)
}
