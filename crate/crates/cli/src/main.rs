//! `phl` — train, diagnose, and evaluate projection-head experiments from
//! flat key-value config files.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure,
//! 4 sweep finished with some child runs failed.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "phl", version, about = "Projection-head experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Train one run from a config file into its output directory.
    Train {
        /// Path to the experiment config.
        config: PathBuf,
        /// Replace an existing run directory instead of refusing.
        #[arg(long)]
        force: bool,
    },
    /// Covariance spectra, ranks, and the range/null-space feature split.
    Diagnose {
        /// A finished run directory (reads its manifest and final checkpoint).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Explicit checkpoint directory (needs --config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config file describing the dataset/model (with --checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write results into this fresh directory instead of the run's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// KNN and linear-probe accuracy over feature components.
    Eval {
        /// A finished run directory (reads its manifest and final checkpoint).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Explicit checkpoint directory (needs --config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config file describing the dataset/model (with --checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Components to evaluate (default: every available one).
        #[arg(long, value_delimiter = ',')]
        components: Vec<String>,
        /// Methods to run: knn, linear (default: both).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Neighbour count override for KNN.
        #[arg(long)]
        k: Option<usize>,
        /// Write results into this fresh directory instead of the run's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a variant × seed matrix as child train processes.
    Sweep {
        /// Path to the experiment config (must carry sweep.variants).
        config: PathBuf,
        /// Replace an existing sweep directory instead of refusing.
        #[arg(long)]
        force: bool,
    },
    /// Export feature matrices (h, z, and available h_r/h_n) for a split.
    ExportFeatures {
        /// A finished run directory (reads its manifest and final checkpoint).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Explicit checkpoint directory (needs --config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config file describing the dataset/model (with --checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which rows to export: train, test, or all.
        #[arg(long, default_value = "train")]
        split: String,
        /// Write results into this fresh directory instead of the run's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        CliCommand::Train { config, force } => commands::train::run(config, *force),
        CliCommand::Diagnose { run, checkpoint, config, out } => commands::diagnose::run(
            run.as_deref(),
            checkpoint.as_deref(),
            config.as_deref(),
            out.as_deref(),
        ),
        CliCommand::Eval { run, checkpoint, config, components, methods, k, out } => {
            commands::evaluate::run(
                run.as_deref(),
                checkpoint.as_deref(),
                config.as_deref(),
                components,
                methods,
                *k,
                out.as_deref(),
            )
        }
        CliCommand::Sweep { config, force } => commands::sweep::run(config, *force),
        CliCommand::ExportFeatures { run, checkpoint, config, split, out } => {
            commands::export::run(
                run.as_deref(),
                checkpoint.as_deref(),
                config.as_deref(),
                split,
                out.as_deref(),
            )
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
