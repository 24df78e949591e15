//! `flowlab` binary: train, sweep, export plot data, or self-check.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 partially
//! failed sweep, 1 anything else.

use clap::{Parser, Subcommand};
use flowlab::cli::{cmd_check, cmd_export_plots, cmd_run, cmd_sweep};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "flowlab",
    about = "Desk-scale policy-optimization lab on enumerable generation environments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once from a JSON config and write run artifacts.
    Run {
        /// Path to the experiment config (JSON).
        config: PathBuf,
        /// Output directory (default: runs/<config-stem>-run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the config's sweep grid (one parameter x seeds) and aggregate.
    Sweep {
        /// Path to the experiment config (JSON) with a sweep section.
        config: PathBuf,
        /// Output directory for all cells and the aggregate tables.
        #[arg(long)]
        out: PathBuf,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Emit tidy plot CSVs for a finished run (or sweep) directory.
    ExportPlots {
        /// A directory previously produced by `run` or `sweep`.
        run_dir: PathBuf,
    },
    /// Run gradient and identity self-checks; print a pass/fail table.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, force } => cmd_run(&config, out, force),
        Command::Sweep { config, out, force } => cmd_sweep(&config, &out, force),
        Command::ExportPlots { run_dir } => cmd_export_plots(&run_dir),
        Command::Check => cmd_check(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
