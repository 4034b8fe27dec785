//! `atlas-slam`: simulate sequences, run the pipeline, evaluate trajectories.
//!
//! Exit codes: 0 success, 2 input error, 3 internal invariant violation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atlas_slam::pipeline::RunMode;

#[derive(Parser, Debug)]
#[command(name = "atlas-slam", version, about = "Multi-map monocular SLAM on synthetic endoscopy sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sequence directory from a scenario config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline over a sequence directory.
    Run {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sequential")]
        mode: RunMode,
        /// Overrides `ransac.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `placerec.vocabulary`.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Sim(3)-aligned RMS ATE of an estimate against ground truth, as JSON.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Run log for coverage.
        #[arg(long)]
        runlog: Option<PathBuf>,
        /// Association tolerance in seconds; defaults to half the median GT period.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Train a vocabulary and write it to disk.
    Vocab {
        #[arg(long)]
        out: PathBuf,
        /// Train on this sequence instead of the built-in training scenario.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long, default_value_t = atlas_slam::placerec::DEFAULT_BRANCHING)]
        branching: u32,
        #[arg(long, default_value_t = atlas_slam::placerec::DEFAULT_DEPTH)]
        depth: u32,
        #[arg(long, default_value_t = atlas_slam::placerec::DEFAULT_TRAINING_SEED)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::Run { sequence, config, out, mode, seed, vocabulary } => {
            commands::run(&sequence, config.as_deref(), &out, mode, seed, vocabulary)
        }
        Command::Eval { estimate, gt, runlog, tolerance } => commands::eval(&estimate, &gt, runlog.as_deref(), tolerance),
        Command::Vocab { out, sequence, branching, depth, seed } => commands::vocab(&out, sequence.as_deref(), branching, depth, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
