//! `volprop`: the pipeline front end. Subcommands generate synthetic studies,
//! preprocess them to an isotropic spacing, train the proposal network,
//! evaluate checkpoints with sliding-window inference, and run the
//! benchmark/memory laboratory.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use volprop_core::error::Error;

use config::Settings;

#[derive(Parser)]
#[command(name = "volprop", version, about = "3-D lung-nodule proposal pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic CT dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        volumes: usize,
        #[arg(long = "nodules-per-volume", default_value_t = 3)]
        nodules_per_volume: usize,
        /// Isotropic voxel spacing of the generated volumes, mm.
        #[arg(long, default_value_t = 1.0)]
        spacing: f32,
        /// Cube side of each generated volume, mm.
        #[arg(long = "side-mm", default_value_t = 128.0)]
        side_mm: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample every volume to an isotropic spacing and normalize intensity.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "spacing-mm")]
        spacing_mm: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the proposal network on a preprocessed dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one configuration key, e.g. --set train.epochs=5.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Restore parameters from the newest checkpoint in OUT/checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Sliding-window inference plus FROC scoring against annotations.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Emit raw decoded candidates without non-maximum suppression.
        #[arg(long = "no-nms")]
        no_nms: bool,
    },
    /// Time the convolution engines or the batch-norm variants.
    Bench {
        #[arg(long, value_parser = ["conv", "bn"])]
        suite: String,
        #[arg(long = "crop-side", default_value_t = 32)]
        crop_side: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Print the report as JSON instead of CSV + table.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate training memory; optionally search the largest feasible crop.
    Mem {
        #[arg(long = "crop-side", default_value_t = 128)]
        crop_side: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Memory budget in bytes for the feasibility search.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { seed, volumes, nodules_per_volume, spacing, side_mm, out } => {
            commands::cmd_synth(seed, volumes, nodules_per_volume, spacing, side_mm, &out)
        }
        Command::Preprocess { input, spacing_mm, out } => {
            commands::cmd_preprocess(&input, spacing_mm, &out)
        }
        Command::Train { data, config, set, out, resume } => {
            let settings = Settings::resolve(config.as_deref(), &set)?;
            commands::cmd_train(&data, config.as_deref(), &settings, &out, resume)
        }
        Command::Eval { data, checkpoint, config, set, out, no_nms } => {
            let settings = Settings::resolve(config.as_deref(), &set)?;
            commands::cmd_eval(&data, &checkpoint, config.as_deref(), &settings, &out, no_nms)
        }
        Command::Bench { suite, crop_side, batch, reps, json, config, set, out } => {
            let settings = Settings::resolve(config.as_deref(), &set)?;
            commands::cmd_bench(
                &suite,
                crop_side,
                batch,
                reps,
                json,
                config.as_deref(),
                &settings,
                out.as_deref(),
            )
        }
        Command::Mem { crop_side, batch, budget, json, config, set, out } => {
            let settings = Settings::resolve(config.as_deref(), &set)?;
            commands::cmd_mem(
                crop_side,
                batch,
                budget,
                json,
                config.as_deref(),
                &settings,
                out.as_deref(),
            )
        }
    }
}

/// 1 usage, 2 data, 3 numeric: configuration and shape problems are usage;
/// anything touching stored artifacts is data; non-finite math is numeric.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Geometry(_) => 1,
        Error::NonFinite { .. } | Error::VariantMismatch(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let wanted = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if wanted { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
