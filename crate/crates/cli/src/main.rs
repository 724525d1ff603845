//! `skinmap`: synthetic data, anchor estimation, training, evaluation and
//! heatmap rendering from one binary.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skinmap_core::datamodel::{Angle, Lighting, MeasureKind};

/// Marks errors caused by the invocation or the config rather than the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "skinmap", version, about = "Skin hydration and water-loss maps from facial images")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Config override such as `train.epochs=4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

fn parse_serde<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}

fn parse_lighting(s: &str) -> Result<Lighting, String> {
    parse_serde(s)
}

fn parse_angle(s: &str) -> Result<Angle, String> {
    parse_serde(s)
}

fn parse_kind(s: &str) -> Result<MeasureKind, String> {
    s.parse().map_err(|e: skinmap_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth {
        /// Also write every record image as PNG under `images/`.
        #[arg(long)]
        export_images: bool,
    },
    /// Select records by lighting, angle or panelist.
    Filter {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_lighting)]
        lighting: Vec<Lighting>,
        #[arg(long, value_delimiter = ',', value_parser = parse_angle)]
        angle: Vec<Angle>,
        #[arg(long, value_delimiter = ',')]
        panelist: Vec<String>,
        /// Keep the records that do NOT match.
        #[arg(long)]
        invert: bool,
        /// Output file name inside the output directory.
        #[arg(long, default_value = "filtered.skd")]
        name: String,
    },
    /// Landmark-to-anchor regression.
    Anchors {
        #[command(subcommand)]
        command: AnchorsCommand,
    },
    /// Train a patch regressor.
    Train {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Validation dataset scored after every `train.val_every` epochs.
        #[arg(long, value_name = "FILE")]
        val: Option<PathBuf>,
    },
    /// Predict every anchor of every record.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Score a checkpoint; shot groups come from the training labels.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        train_data: PathBuf,
    },
    /// Hold out each lighting tag in turn, with and without lighting augmentation.
    LooLighting {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Train configs A..E on a panelist split and report each.
    Ablation {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Render a heatmap for one record of a predictions file.
    Heatmap {
        #[arg(long, value_name = "FILE")]
        predictions: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Index into the predictions file's records.
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// Color scale; defaults to the predictions' kind.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<MeasureKind>,
        /// Landmarks JSON; their convex hull bounds the map.
        #[arg(long, value_name = "FILE")]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        no_legend: bool,
        #[arg(long, default_value = "heatmap.png")]
        name: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum AnchorsCommand {
    /// Fit the regressor on a pairs file or on synthetic pairs.
    Train {
        #[arg(long, value_name = "FILE")]
        pairs: Option<PathBuf>,
    },
    /// Mean error rate on a pairs file or on fresh synthetic pairs.
    Eval {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        pairs: Option<PathBuf>,
    },
    /// Anchors for one landmark set.
    Predict {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        landmarks: PathBuf,
    },
    /// Write synthetic (landmarks, anchors) pairs.
    Pairs {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value = "pairs.json")]
        name: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
