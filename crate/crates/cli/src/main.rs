//! `lteode` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{CommonArgs, DataArgs, ScenarioArgs, TrainArgs};
use lteode::dynamics::MaskMode;

/// Input that could not be read or does not fit together. Exits with code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct DataError(pub String);

/// A checked invariant or verdict failed. Exits with code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InvariantError(pub String);

#[derive(Debug, Parser)]
#[command(name = "lteode", version, about = "Truncation-error-gated hybrid neural ODE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shock series, its metadata, edge list and event log.
    GenerateData {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Train one variant and write a checkpoint plus training history.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every variant with a shared seed and tabulate test metrics.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Mask histogram of a checkpoint over the test split, split by logged shocks.
    MaskStats {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measured vs expected vector-field evaluations and FLOP estimates.
    NfeReport {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long, value_parser = config::parse_mask_mode)]
        mask_mode: Option<MaskMode>,
        #[arg(long)]
        n_nodes: Option<usize>,
    },
    /// Show that compensation lets two trajectories cross while the plain flow cannot.
    IntersectDemo {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Compare mask distributions of the full model and manifold-penalty runs.
    Collapse {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated penalty weights.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { common, scenario } => {
            let mut cfg = common.resolve()?;
            scenario.apply(&mut cfg);
            commands::generate_data(&cfg)
        }
        Command::Train { common, data, train } => {
            let mut cfg = common.resolve()?;
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            commands::train(&cfg)
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            split,
        } => {
            let mut cfg = common.resolve()?;
            data.apply(&mut cfg);
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            commands::evaluate(&cfg, &split)
        }
        Command::Ablate { common, data, train } => {
            let mut cfg = common.resolve()?;
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            commands::ablate(&cfg)
        }
        Command::MaskStats {
            common,
            data,
            checkpoint,
        } => {
            let mut cfg = common.resolve()?;
            data.apply(&mut cfg);
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            commands::mask_stats(&cfg)
        }
        Command::NfeReport {
            common,
            steps,
            mask_mode,
            n_nodes,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = steps {
                cfg.steps_list = s;
            }
            if let Some(n) = n_nodes {
                cfg.n_nodes = n;
            }
            commands::nfe_report(&cfg, mask_mode)
        }
        Command::IntersectDemo { common, steps } => {
            let mut cfg = common.resolve()?;
            cfg.steps = steps;
            commands::intersect_demo(&cfg)
        }
        Command::Collapse {
            common,
            data,
            train,
            lambdas,
        } => {
            let mut cfg = common.resolve()?;
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            if let Some(l) = lambdas {
                cfg.lambdas = l;
            }
            commands::collapse(&cfg)
        }
    }
}

/// Exit code and label for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.is::<DataError>() {
            return (2, "data");
        }
        if cause.is::<InvariantError>() {
            return (3, "invariant");
        }
        if let Some(e) = cause.downcast_ref::<lteode::Error>() {
            return if e.is_data_error() { (2, "data") } else { (3, "numeric") };
        }
        if cause.is::<std::io::Error>() {
            return (2, "data");
        }
    }
    (3, "internal")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage");
            eprintln!("lteode: error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, label) = classify(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("lteode: error[{label}]: {msg}");
            ExitCode::from(code)
        }
    }
}
