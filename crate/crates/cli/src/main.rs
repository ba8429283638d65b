//! `streamdial` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
//! 3 failed bench assertion.

mod bench;
mod eval;
mod gen_data;
mod run;
mod stream;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use run::{Precision, UsageError};

#[derive(Debug, Parser)]
#[command(name = "streamdial", version, about = "Train, replay and evaluate streaming video-dialogue models")]
struct Cli {
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision for model math.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Directory that receives timestamped run directories.
    #[arg(long, global = true, env = "STREAMDIAL_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize train/val JSONL datasets.
    GenData(gen_data::GenDataArgs),
    /// Train a model under one scheme.
    Train(train::TrainArgs),
    /// Compute streaming metrics for a checkpoint.
    Eval(eval::EvalArgs),
    /// Replay one stream through the real-time engine.
    Stream(stream::StreamArgs),
    /// Compare schemes and check the expected orderings.
    Bench(bench::BenchArgs),
}

/// Options shared by every subcommand.
pub struct Global {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub output_root: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<streamdial::Error>() {
            return match e.root() {
                streamdial::Error::Config(_)
                | streamdial::Error::Parse { .. }
                | streamdial::Error::SchemaVersion { .. }
                | streamdial::Error::UnknownToken(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let global = Global { seed: cli.seed, precision: cli.precision, output_root: cli.output_root };
    let result = match cli.command {
        Command::GenData(a) => gen_data::run(a, &global).map(|_| true),
        Command::Train(a) => train::run(a, &global).map(|_| true),
        Command::Eval(a) => eval::run(a, &global).map(|_| true),
        Command::Stream(a) => stream::run(a, &global).map(|_| true),
        Command::Bench(a) => bench::run(a, &global),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("bench: one or more checks failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
