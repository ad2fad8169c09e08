use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

/// Marks errors caused by the invocation or its configuration (exit 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "priceform", version, about = "Synthetic order books, next-move models and the experiments comparing them")]
struct Cli {
    /// Replaces every `seed` and `init_seed` in the config document.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; locked for the duration of the command.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for per-stock jobs.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a universe of stocks into LOBSTER message files.
    Simulate { config: PathBuf },
    /// Replay message files into event-time datasets.
    BuildDataset { config: PathBuf },
    /// Train one model on a built dataset.
    Train { config: PathBuf },
    /// Run an experiment and check its assertions.
    Experiment {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(priceform_core::eval::experiments::EXPERIMENTS))]
        name: String,
        config: PathBuf,
    },
    /// Write the JSON schemas of every config document.
    Schemas {
        #[arg(default_value = "schemas")]
        dir: PathBuf,
    },
}

pub struct Global {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub parallelism: usize,
}

fn is_usage(err: &anyhow::Error) -> bool {
    use priceform_core::eval::EvalError;
    use priceform_core::sim::SimError;
    use priceform_core::train::TrainError;
    err.chain().any(|e| {
        e.is::<Usage>()
            || matches!(e.downcast_ref::<EvalError>(), Some(EvalError::InvalidConfig(_)))
            || matches!(
                e.downcast_ref::<SimError>(),
                Some(SimError::InvalidConfig { .. } | SimError::EmptyRange { .. })
            )
            || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::InvalidConfig { .. }))
    })
}

fn run(cli: Cli) -> Result<bool> {
    let g = Global {
        seed: cli.seed,
        out: cli.out,
        parallelism: cli
            .parallelism
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1),
    };
    match cli.command {
        Command::Simulate { config } => commands::simulate(&g, &config),
        Command::BuildDataset { config } => commands::build_dataset(&g, &config),
        Command::Train { config } => commands::train(&g, &config),
        Command::Experiment { name, config } => commands::experiment(&g, &name, &config),
        Command::Schemas { dir } => commands::schemas(&dir).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 3 })
        }
    }
}
