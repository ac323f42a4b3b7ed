//! `lmfd-pad`: train, evaluate and inspect the frequency-decomposition PAD model.
//!
//! Exit codes: 0 success, 2 validation or configuration error, 3 numerical
//! divergence during training, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lmfd-pad", version, about = "Face presentation attack detection with learnable frequency decomposition")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

/// Training configuration sources shared by every training command.
#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML training config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set optimizer.lr0=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a manifest's train split, monitoring its dev split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the checkpoint, log and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Apply an ablation preset on top of the config.
        #[arg(long)]
        preset: Option<String>,
        /// Skip scoring the test split after training.
        #[arg(long)]
        no_test: bool,
    },
    /// Score a manifest split with a checkpoint and report PAD metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// `dev-eer`, `test-eer` (the evaluated split's own EER) or a number.
        #[arg(long, default_value = "dev-eer")]
        threshold: String,
        /// Frames per video; defaults to the checkpoint's training setting.
        #[arg(long)]
        frames_per_video: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the frequency components of images as PNG panels and `.npy` stacks.
    Decompose {
        /// Image files, or directories of PNG/JPEG images, to decompose.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Use this checkpoint's learned filters and normalization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Square size the images are resized to (without a checkpoint).
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Also dump each band's combined filter as a text grid.
        #[arg(long)]
        mask_snapshot: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic bona fide / print / replay corpus with a manifest.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        videos_per_class: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        dataset_id: String,
        /// Attack modes, comma separated: print, replay.
        #[arg(long, default_value = "print,replay", value_delimiter = ',')]
        attacks: Vec<String>,
    },
    /// Check a manifest's structure and, optionally, every referenced image.
    ValidateManifest {
        manifest: PathBuf,
        /// Decode every image and check crop boxes.
        #[arg(long)]
        check_files: bool,
    },
    /// Export frame embeddings plus PCA reductions.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        frames_per_video: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric tables from score CSVs or a protocol summary.
    Report {
        /// Score CSV to report on.
        #[arg(long, conflicts_with = "summary")]
        scores: Option<PathBuf>,
        /// Dev score CSV for the threshold (default: the scores' own EER).
        #[arg(long)]
        dev_scores: Option<PathBuf>,
        /// Fixed threshold instead of an EER.
        #[arg(long)]
        threshold: Option<f64>,
        /// `summary.json` written by `protocol`.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and test the component ablation presets.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest with train/dev/test splits.
        #[arg(long, required_unless_present = "protocol", conflicts_with = "protocol")]
        manifest: Option<PathBuf>,
        /// Protocol file; every preset runs on every fold.
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long, default_value = "rgb_bce,rgb_mfd_bce,full_bce,full_flsl", value_delimiter = ',')]
        presets: Vec<String>,
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test every fold of an evaluation protocol.
    Protocol {
        #[command(flatten)]
        config: ConfigArgs,
        /// Protocol definition file.
        #[arg(long, required_unless_present = "lodo", conflicts_with = "lodo")]
        protocol: Option<PathBuf>,
        /// Leave-one-dataset-out over `dataset_id=manifest` pairs.
        #[arg(long, value_name = "ID=MANIFEST", num_args = 2..)]
        lodo: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_secs()
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<lmfd_core::Error>())
                .map_or(1, lmfd_core::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
