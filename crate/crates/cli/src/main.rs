//! `hpfr`: fit heavy-tailed-process functional regression models, predict
//! subject-specific curves with calibrated intervals, and run the simulation
//! benchmark.
//!
//! Exit codes: 0 success, 1 error, 2 fit did not converge.

mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hpfr", version, about = "Robust functional regression with heavy-tailed processes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one or more mixing families and write fit artifacts, diagnostics
    /// and a comparative report.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated family labels (N, T, T1, SL, SL1, CN); overrides the config.
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: [output].dir or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Subject ids to drop for an outlier-deletion refit.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
    },
    /// Predict target points from a fit artifact.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Fit artifact written by `hpfr fit`.
        #[arg(long)]
        artifact: PathBuf,
        /// Targets CSV (overrides [predict].targets).
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the simulation benchmark and write report tables.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scheme I..VI.
        #[arg(long)]
        scheme: Option<String>,
        /// Observations per subject.
        #[arg(long)]
        n: Option<usize>,
        /// Training subjects.
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated family labels.
        #[arg(long)]
        families: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// New-subject experiment: `random` (interpolation) or `terminal`
        /// (extrapolation).
        #[arg(long)]
        new_subject: Option<String>,
        /// Skip interval computation (RMSE only).
        #[arg(long)]
        no_intervals: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let result = match cli.command {
        Command::Fit { config, family, seed, out, exclude } => {
            commands::cmd_fit(&commands::FitArgs { config, family, seed, out, exclude })
        }
        Command::Predict { config, artifact, targets, out } => {
            commands::cmd_predict(&commands::PredictArgs { config, artifact, targets, out })
        }
        Command::Simulate {
            config,
            scheme,
            n,
            subjects,
            reps,
            families,
            seed,
            out,
            new_subject,
            no_intervals,
        } => commands::cmd_simulate(&commands::SimulateArgs {
            config,
            scheme,
            n,
            subjects,
            reps,
            families,
            seed,
            out,
            new_subject,
            no_intervals,
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
