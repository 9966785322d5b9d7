//! `msf`: one binary covering dataset generation, training, evaluation,
//! kernel benchmarks, and attention export.
//!
//! Every config key doubles as a long flag under the same name, so
//! `--config file` plus a handful of `--key value` overrides fully
//! describes a run.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "msf", about = "Motion-aware state-fusion video recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic train and val dataset files
    Gen(CommonArgs),
    /// Train a model; emits metrics.csv plus final and best checkpoints
    Train(CommonArgs),
    /// Score a checkpoint on one dataset split
    Eval(CommonArgs),
    /// Time the scan kernels against a quadratic attention foil
    Bench(CommonArgs),
    /// Export per-location fusion weights for one clip
    #[command(name = "export-attn")]
    ExportAttn(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` config file, applied before flag overrides
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Architecture preset: tiny, small, middle, or desk
    #[arg(long)]
    preset: Option<String>,
    /// Embedding width override
    #[arg(long = "d")]
    d: Option<usize>,
    /// Block count override
    #[arg(long)]
    layers: Option<usize>,
    /// SSM state size override
    #[arg(long = "n_state")]
    n_state: Option<usize>,
    /// Spatial patch size override
    #[arg(long)]
    patch: Option<usize>,
    /// Frames per clip override
    #[arg(long)]
    frames: Option<usize>,
    /// Frame height override
    #[arg(long)]
    height: Option<usize>,
    /// Frame width override
    #[arg(long)]
    width: Option<usize>,
    /// Comma-separated odd fusion windows, e.g. 3,5,7
    #[arg(long)]
    scales: Option<String>,
    /// Motion field: central, first_order, or none
    #[arg(long = "motion_mode")]
    motion_mode: Option<String>,
    /// Scale aggregation: aswm or average
    #[arg(long)]
    aggregate: Option<String>,
    /// Number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Linear warm-up epochs
    #[arg(long = "warmup_epochs")]
    warmup_epochs: Option<usize>,
    /// Base learning rate at batch 256
    #[arg(long = "base_lr_per_256")]
    base_lr_per_256: Option<f64>,
    /// Batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Decoupled weight decay
    #[arg(long = "weight_decay")]
    weight_decay: Option<f64>,
    /// Master seed for data, init, and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Validation top-1 the train command must reach to exit 0
    #[arg(long = "top1_floor")]
    top1_floor: Option<f64>,
    /// Training clips generated per class
    #[arg(long = "clips_per_class")]
    clips_per_class: Option<usize>,
    /// Validation clips generated per class
    #[arg(long = "val_clips_per_class")]
    val_clips_per_class: Option<usize>,
    /// Motion amplitude in pixels
    #[arg(long)]
    amplitude: Option<f64>,
    /// Additive pixel noise sigma
    #[arg(long = "noise_sigma")]
    noise_sigma: Option<f64>,
    /// Appearance-matched classes that differ only in trajectory
    #[arg(long = "motion_only")]
    motion_only: Option<bool>,
    /// Shuffle each clip's frames (control experiment)
    #[arg(long = "shuffle_frames")]
    shuffle_frames: Option<bool>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Training dataset file (default <out>/train.msfv)
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Validation dataset file (default <out>/val.msfv)
    #[arg(long = "val_data", value_name = "PATH")]
    val_data: Option<PathBuf>,
    /// Checkpoint file (default <out>/final.msfw)
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dataset split for eval and export-attn: train or val
    #[arg(long)]
    split: Option<String>,
    /// Clip index for export-attn
    #[arg(long)]
    clip: Option<usize>,
    /// Timing repetitions per benchmark point
    #[arg(long = "bench_runs")]
    bench_runs: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> msf_core::error::Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            rc.apply_file(path)?;
        }
        let mut overrides: Vec<(&str, String)> = Vec::new();
        let mut push = |key: &'static str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((key, v));
            }
        };
        push("preset", self.preset.clone());
        push("d", self.d.map(|v| v.to_string()));
        push("layers", self.layers.map(|v| v.to_string()));
        push("n_state", self.n_state.map(|v| v.to_string()));
        push("patch", self.patch.map(|v| v.to_string()));
        push("frames", self.frames.map(|v| v.to_string()));
        push("height", self.height.map(|v| v.to_string()));
        push("width", self.width.map(|v| v.to_string()));
        push("scales", self.scales.clone());
        push("motion_mode", self.motion_mode.clone());
        push("aggregate", self.aggregate.clone());
        push("classes", self.classes.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("warmup_epochs", self.warmup_epochs.map(|v| v.to_string()));
        push("base_lr_per_256", self.base_lr_per_256.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("weight_decay", self.weight_decay.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("top1_floor", self.top1_floor.map(|v| v.to_string()));
        push("clips_per_class", self.clips_per_class.map(|v| v.to_string()));
        push(
            "val_clips_per_class",
            self.val_clips_per_class.map(|v| v.to_string()),
        );
        push("amplitude", self.amplitude.map(|v| v.to_string()));
        push("noise_sigma", self.noise_sigma.map(|v| v.to_string()));
        push("motion_only", self.motion_only.map(|v| v.to_string()));
        push("shuffle_frames", self.shuffle_frames.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|v| v.display().to_string()));
        push("data", self.data.as_ref().map(|v| v.display().to_string()));
        push(
            "val_data",
            self.val_data.as_ref().map(|v| v.display().to_string()),
        );
        push(
            "checkpoint",
            self.checkpoint.as_ref().map(|v| v.display().to_string()),
        );
        push("split", self.split.clone());
        push("clip", self.clip.map(|v| v.to_string()));
        push("bench_runs", self.bench_runs.map(|v| v.to_string()));
        for (key, value) in overrides {
            rc.apply(key, &value)?;
        }
        Ok(rc)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> msf_core::error::Result<i32> {
        match &cli.cmd {
            Cmd::Gen(args) => commands::cmd_gen(&args.resolve()?),
            Cmd::Train(args) => commands::cmd_train(&args.resolve()?),
            Cmd::Eval(args) => commands::cmd_eval(&args.resolve()?),
            Cmd::Bench(args) => commands::cmd_bench(&args.resolve()?),
            Cmd::ExportAttn(args) => commands::cmd_export_attn(&args.resolve()?),
        }
    };
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
