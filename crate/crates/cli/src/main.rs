//! Command-line frontend for the pixel-embedding learner.
//!
//! Exit codes: 0 on success, 2 for usage, configuration, or data-format
//! problems (anything the caller can fix by changing inputs), 1 for runtime
//! failures. Results meant for machines (evaluation reports, rankings) go
//! to stdout; progress and warnings go to stderr.

mod commands;
mod config;
mod dataset;
mod netpbm;
mod synth;

use clap::Parser;
use maskcontrast_core::error::Error;

#[derive(Debug, Parser)]
#[command(
    name = "maskcontrast",
    version,
    about = "Per-pixel embeddings from salient-object contrast: synthesize data, train, evaluate, and retrieve"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Train the embedding model on a dataset directory.
    Train(commands::TrainArgs),
    /// Score a checkpoint against ground-truth labels.
    Eval(commands::EvalArgs),
    /// Build a segment index from a checkpoint and a dataset.
    Index(commands::IndexArgs),
    /// Rank indexed segments against a query segment.
    Retrieve(commands::RetrieveArgs),
    /// Generate a synthetic single-object dataset.
    Synth(commands::SynthArgs),
}

/// Usage, configuration, and data problems are the caller's to fix: exit 2.
/// Everything else (I/O failures, numeric breakdowns) is a runtime error.
fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::Data(_) | Error::Format { .. } => 2,
        _ => 1,
    }
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Index(args) => commands::cmd_index(args),
        Command::Retrieve(args) => commands::cmd_retrieve(args),
        Command::Synth(args) => commands::cmd_synth(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            std::process::ExitCode::from(exit_code(&error))
        }
    }
}
