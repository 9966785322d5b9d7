//! Run configuration: one flat key space shared by the config file and
//! the command-line flags.
//!
//! Values resolve in three layers: built-in defaults, then `key = value`
//! lines from `--config`, then individual flags. Unknown keys in the
//! file are a hard error, and the fully resolved set is echoed into
//! every run log so an experiment can be reproduced from its artifacts
//! alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msf_core::aswm::AggregateMode;
use msf_core::error::{MsfError, Result};
use msf_core::mcfm::MotionMode;
use msf_core::model::{ModelConfig, TrainConfig};
use msf_core::synthgen::SynthSpec;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub d: Option<usize>,
    pub layers: Option<usize>,
    pub n_state: Option<usize>,
    pub patch: Option<usize>,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub scales: Vec<usize>,
    pub motion_mode: MotionMode,
    pub aggregate: AggregateMode,
    pub classes: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr_per_256: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub top1_floor: f64,
    pub clips_per_class: usize,
    pub val_clips_per_class: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub motion_only: bool,
    pub shuffle_frames: bool,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: String,
    pub clip: usize,
    pub bench_runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            d: None,
            layers: None,
            n_state: None,
            patch: None,
            frames: None,
            height: None,
            width: None,
            scales: vec![3, 5, 7],
            motion_mode: MotionMode::Central,
            aggregate: AggregateMode::Aswm,
            classes: 10,
            epochs: 30,
            warmup_epochs: 5,
            base_lr_per_256: 4e-4,
            batch: 8,
            weight_decay: 0.05,
            seed: 0,
            top1_floor: 0.0,
            clips_per_class: 20,
            val_clips_per_class: 10,
            amplitude: 2.0,
            noise_sigma: 0.02,
            motion_only: false,
            shuffle_frames: false,
            out: PathBuf::from("out"),
            data: None,
            val_data: None,
            checkpoint: None,
            split: "val".into(),
            clip: 0,
            bench_runs: 5,
        }
    }
}

fn parse<T>(key: &str, value: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| {
        MsfError::Config(format!("config key '{key}': cannot parse '{value}': {e}"))
    })
}

fn parse_scales(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse("scales", part.trim()))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` assignment. Both the config file and
    /// the flag layer funnel through here, so parsing and the set of
    /// legal keys cannot drift apart.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = value.to_string(),
            "d" => self.d = Some(parse(key, value)?),
            "layers" => self.layers = Some(parse(key, value)?),
            "n_state" => self.n_state = Some(parse(key, value)?),
            "patch" => self.patch = Some(parse(key, value)?),
            "frames" => self.frames = Some(parse(key, value)?),
            "height" => self.height = Some(parse(key, value)?),
            "width" => self.width = Some(parse(key, value)?),
            "scales" => self.scales = parse_scales(value)?,
            "motion_mode" => self.motion_mode = value.parse()?,
            "aggregate" => self.aggregate = value.parse()?,
            "classes" => self.classes = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "base_lr_per_256" => self.base_lr_per_256 = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "top1_floor" => self.top1_floor = parse(key, value)?,
            "clips_per_class" => self.clips_per_class = parse(key, value)?,
            "val_clips_per_class" => self.val_clips_per_class = parse(key, value)?,
            "amplitude" => self.amplitude = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "motion_only" => self.motion_only = parse(key, value)?,
            "shuffle_frames" => self.shuffle_frames = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = Some(PathBuf::from(value)),
            "val_data" => self.val_data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "split" => self.split = value.to_string(),
            "clip" => self.clip = parse(key, value)?,
            "bench_runs" => self.bench_runs = parse(key, value)?,
            other => {
                return Err(MsfError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Reads a flat `key = value` file. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| MsfError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MsfError::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Architecture resolved from the preset plus any explicit overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.n_state {
            cfg.n_state = v;
        }
        if let Some(v) = self.patch {
            cfg.patch = v;
        }
        if let Some(v) = self.frames {
            cfg.frames = v;
        }
        if let Some(v) = self.height {
            cfg.height = v;
        }
        if let Some(v) = self.width {
            cfg.width = v;
        }
        cfg.scales = self.scales.clone();
        cfg.motion_mode = self.motion_mode;
        cfg.aggregate = self.aggregate;
        cfg.classes = self.classes;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            base_lr_per_256: self.base_lr_per_256,
            batch: self.batch,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        };
        tc.validate()?;
        Ok(tc)
    }

    /// Generator settings for the current model geometry.
    pub fn synth_spec(&self, cfg: &ModelConfig) -> Result<SynthSpec> {
        let spec = SynthSpec {
            classes: self.classes,
            clips_per_class: self.clips_per_class,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            amplitude: self.amplitude,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            motion_only: self.motion_only,
            shuffle_frames: self.shuffle_frames,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("train.msfv"))
    }

    pub fn val_data_path(&self) -> PathBuf {
        self.val_data.clone().unwrap_or_else(|| self.out.join("val.msfv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("final.msfw"))
    }

    pub fn split_data_path(&self) -> Result<PathBuf> {
        match self.split.as_str() {
            "train" => Ok(self.data_path()),
            "val" => Ok(self.val_data_path()),
            other => Err(MsfError::Config(format!(
                "split must be 'train' or 'val', got '{other}'"
            ))),
        }
    }

    /// Every effective value, one `key = value` line each, in a fixed
    /// order. The output is itself a valid config file.
    pub fn echo(&self) -> Result<String> {
        let cfg = self.model_config()?;
        let scales: Vec<String> = cfg.scales.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", cfg.preset);
        let _ = writeln!(s, "d = {}", cfg.d);
        let _ = writeln!(s, "layers = {}", cfg.layers);
        let _ = writeln!(s, "n_state = {}", cfg.n_state);
        let _ = writeln!(s, "patch = {}", cfg.patch);
        let _ = writeln!(s, "frames = {}", cfg.frames);
        let _ = writeln!(s, "height = {}", cfg.height);
        let _ = writeln!(s, "width = {}", cfg.width);
        let _ = writeln!(s, "scales = {}", scales.join(","));
        let _ = writeln!(s, "motion_mode = {}", cfg.motion_mode);
        let _ = writeln!(s, "aggregate = {}", cfg.aggregate);
        let _ = writeln!(s, "classes = {}", cfg.classes);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "base_lr_per_256 = {}", self.base_lr_per_256);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "top1_floor = {}", self.top1_floor);
        let _ = writeln!(s, "clips_per_class = {}", self.clips_per_class);
        let _ = writeln!(s, "val_clips_per_class = {}", self.val_clips_per_class);
        let _ = writeln!(s, "amplitude = {}", self.amplitude);
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "motion_only = {}", self.motion_only);
        let _ = writeln!(s, "shuffle_frames = {}", self.shuffle_frames);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "data = {}", self.data_path().display());
        let _ = writeln!(s, "val_data = {}", self.val_data_path().display());
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint_path().display());
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "clip = {}", self.clip);
        let _ = writeln!(s, "bench_runs = {}", self.bench_runs);
        Ok(s)
    }
}

/// Worker-thread cap from `MSF_THREADS`. Unset means one thread.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("MSF_THREADS") {
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|e| {
                MsfError::Config(format!("MSF_THREADS: cannot parse '{raw}': {e}"))
            })?;
            if n == 0 {
                return Err(MsfError::Config("MSF_THREADS must be >= 1".into()));
            }
            Ok(n)
        }
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(MsfError::Config(format!("MSF_THREADS: {e}"))),
    }
}
