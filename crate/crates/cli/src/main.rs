//! `rem`: synthesize, train, interpolate, evaluate and export radio
//! environment maps. Every command writes its outputs plus a
//! `<command>.manifest.json` into the output directory.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rem_core::RemError;

#[derive(Debug, Parser)]
#[command(name = "rem", version, about = "Radio environment mapping from radial sequences")]
pub struct Cli {
    /// TOML run configuration. Missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if needed).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override `range.r_max` in meters.
    #[arg(long, global = true)]
    pub rmax: Option<f64>,
    /// Override `range.step` in meters.
    #[arg(long, global = true)]
    pub step: Option<f64>,
    /// Override the ingest RSRP floor in dBm.
    #[arg(long = "floor-dbm", global = true, allow_negative_numbers = true)]
    pub floor_dbm: Option<f64>,
    /// Comma separated. For `synth`: slice altitudes in meters. Elsewhere:
    /// altitude labels to keep from the primary input file.
    #[arg(long, global = true, value_delimiter = ',')]
    pub altitudes: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic measurement set from the configured scenario.
    Synth,
    /// Stage 1: masked pretraining on the configured deterministic world.
    Pretrain {
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Stage 2: fine-tune a checkpoint on measurements.
    Finetune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use this validation file and train on all of `--data` instead of
        /// splitting `--data` into train, validation and test files.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Predict RSRP at the locations of a CSV file with a checkpoint.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit ordinary kriging, optionally predicting at query locations.
    Krige {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        query: Option<PathBuf>,
    },
    /// Radial correlogram of a measurement set.
    Correlate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Error metrics against a truth file, overall and per altitude label.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[command(flatten)]
        source: PredictionSource,
    },
    /// Evaluate a predictor over a Cartesian grid.
    Export {
        #[command(flatten)]
        source: PredictorSource,
    },
    /// Re-run a manifest and check that every output is byte-identical.
    Replay { manifest: PathBuf },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct PredictionSource {
    /// Checkpoint to predict with.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Measurement-format CSV of predictions, matched to truth by position.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Fit kriging on this measurement file and predict with it.
    #[arg(long)]
    pub kriging: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct PredictorSource {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub kriging: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<RemError>() {
            return match e.category() {
                "config" => 2,
                "io" => 3,
                "data" => 4,
                "numerical" => 5,
                _ => 6,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REM_LOG", "info")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match commands::run(cli, argv, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
