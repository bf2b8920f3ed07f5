//! Command-line entry point: data generation, training, evaluation,
//! runtime benchmarks and sequence-length sweeps.

mod bench;
mod eval;
mod generate;
mod sweep;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gtfdeer::{Error, PresetName};

/// Exit status for configuration problems.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for numerical divergence.
pub const EXIT_DIVERGENCE: u8 = 3;
/// Exit status when too many updates were skipped for non-convergence.
pub const EXIT_NON_CONVERGENCE: u8 = 4;

/// An error that carries its own exit status.
#[derive(Debug)]
pub struct CodedError {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for CodedError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CodedError {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    CodedError {
        code: EXIT_CONFIG,
        message: message.into(),
    }
    .into()
}

pub fn parse_preset(name: &str) -> anyhow::Result<PresetName> {
    PresetName::parse(name).ok_or_else(|| {
        let known: Vec<&str> = PresetName::ALL.iter().map(|p| p.as_str()).collect();
        config_error(format!("unknown preset '{name}' (known: {})", known.join(", ")))
    })
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Parser)]
#[command(
    name = "gtfdeer",
    version,
    about = "Parallel-in-time teacher-forced training of recurrent models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a benchmark system and write train/test trajectories.
    Generate(generate::Args),
    /// Train a model from a preset and/or config file.
    Train(train::Args),
    /// Evaluate a checkpoint on a test trajectory.
    Eval(eval::Args),
    /// Time sequential and parallel forward+backward passes.
    Bench(bench::Args),
    /// Sequence-length sweep at a fixed batch-size × length product.
    Sweep(sweep::Args),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(c) = err.downcast_ref::<CodedError>() {
        return c.code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(
            Error::NonFiniteLoss { .. }
            | Error::NewtonDivergence { .. }
            | Error::IntegrationDivergence { .. }
            | Error::TrajectoryDivergence { .. },
        ) => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Sweep(a) => sweep::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
