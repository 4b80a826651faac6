//! `floodgtn`: synthetic data generation, training, evaluation, prediction
//! and plot-data export for graph-transformer water-level forecasting.
//!
//! Exit status is 0 on success, 2 for invalid configuration or input
//! (including usage errors) and 1 for runtime failures. Errors are reported
//! as a single `error: ...` line on stderr.

mod artifacts;
mod evaluate;
mod generate;
mod plot;
mod predict;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use floodgtn::Error;

#[derive(Parser)]
#[command(name = "floodgtn", version, about = "Graph transformer water-level forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write `data.csv` with its channel manifest and topology.
    Generate {
        /// Bundled scenario (`default`, `causal`, `tide-dominated`) or a scenario file.
        #[arg(long, default_value = "default")]
        scenario: String,
        /// Overrides the scenario duration.
        #[arg(long)]
        hours: Option<usize>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train every configured model and arm; writes checkpoints, loss histories and timings.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score trained checkpoints on the test split; writes report.csv, report.txt and per_step.csv.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Forecast from one window of `w` (future covariates held) or `w+k` rows.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV in the data schema of the checkpoint's channels.
        #[arg(long)]
        window: PathBuf,
        #[arg(long, default_value = "prediction")]
        out: PathBuf,
    },
    /// Observed and forecast traces over the test split as tidy CSV.
    PlotData {
        #[arg(long)]
        config: PathBuf,
        /// Forecast lead in hours, 1..=k; defaults to k.
        #[arg(long)]
        lead: Option<usize>,
        #[arg(long, default_value = "with-fpc")]
        arm: String,
        /// Output file; defaults to `plot_data.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_status(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::InvalidConfig(_)
            | Error::ConfigMismatch(_)
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::NonHourly { .. }
            | Error::GapTooLong { .. }
            | Error::UnknownNode { .. }
            | Error::FrameTooShort { .. }
            | Error::DuplicateNode(_)
            | Error::DanglingEndpoint(..)
            | Error::Disconnected(..)
            | Error::EmptyTargets
            | Error::InvalidTarget(..),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", msg.join(" "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Generate {
            scenario,
            hours,
            seed,
            out,
        } => generate::run(&scenario, hours, seed, &out),
        Command::Train { config } => train::run(&config),
        Command::Evaluate { config } => evaluate::run(&config),
        Command::Predict {
            checkpoint,
            window,
            out,
        } => predict::run(&checkpoint, &window, &out),
        Command::PlotData { config, lead, arm, out } => plot::run(&config, lead, &arm, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_status(&e))
        }
    }
}
