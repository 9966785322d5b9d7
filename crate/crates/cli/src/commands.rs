//! Subcommand implementations. Each one resolves the run configuration,
//! does its work under `out`, and leaves a `run.log` recording the
//! effective config, parameter count where a model is involved, and
//! wall-clock time.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use msf_core::aswm::AggregateMode;
use msf_core::bench;
use msf_core::checkpoint;
use msf_core::error::{MsfError, Result};
use msf_core::model::{self, ModelConfig, ModelParams};
use msf_core::synthgen::{self, DatasetHeader, SynthSpec};
use msf_core::tape::Tape;
use msf_core::tokenizer::VideoClip;
use msf_core::trainer;

use crate::config::{threads_from_env, RunConfig};

const METRICS_HEADER: &str = "epoch,split,loss,top1,top5,lr";

fn io_err(path: &Path, source: std::io::Error) -> MsfError {
    MsfError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_out(rc: &RunConfig) -> Result<()> {
    fs::create_dir_all(&rc.out).map_err(|e| io_err(&rc.out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn finish_log(rc: &RunConfig, mut log: String, started: Instant) -> Result<()> {
    let _ = writeln!(
        log,
        "wall_clock_secs = {:.3}",
        started.elapsed().as_secs_f64()
    );
    write_text(&rc.out.join("run.log"), &log)
}

fn log_header(rc: &RunConfig, command: &str) -> Result<String> {
    let mut log = String::new();
    let _ = writeln!(log, "command = {command}");
    log.push_str(&rc.echo()?);
    Ok(log)
}

fn check_dataset(cfg: &ModelConfig, header: &DatasetHeader, path: &Path) -> Result<()> {
    if (header.frames, header.height, header.width) != (cfg.frames, cfg.height, cfg.width)
        || header.classes != cfg.classes
    {
        return Err(MsfError::Config(format!(
            "dataset {} holds {} classes of {}x{}x{} clips, model expects {} classes of {}x{}x{}",
            path.display(),
            header.classes,
            header.frames,
            header.height,
            header.width,
            cfg.classes,
            cfg.frames,
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

fn read_split(cfg: &ModelConfig, path: &Path) -> Result<Vec<(VideoClip, usize)>> {
    let (clips, header) = synthgen::read_dataset(path)?;
    check_dataset(cfg, &header, path)?;
    Ok(clips)
}

/// Writes the train file and, when `val_clips_per_class > 0`, a val file
/// drawn from the same clip universe at disjoint per-class indices.
pub fn cmd_gen(rc: &RunConfig) -> Result<i32> {
    let started = Instant::now();
    let cfg = rc.model_config()?;
    let spec = rc.synth_spec(&cfg)?;
    ensure_out(rc)?;
    let mut log = log_header(rc, "gen")?;

    let train_path = rc.data_path();
    if let Some(parent) = train_path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    synthgen::write_dataset_range(&spec, &train_path, 0, rc.clips_per_class)?;
    let manifest = spec.manifest();
    println!("wrote {}", train_path.display());
    print!("{manifest}");
    let _ = writeln!(log, "train = {}", train_path.display());
    log.push_str(&manifest);

    if rc.val_clips_per_class > 0 {
        let val_path = rc.val_data_path();
        if let Some(parent) = val_path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let lo = rc.clips_per_class;
        synthgen::write_dataset_range(&spec, &val_path, lo, lo + rc.val_clips_per_class)?;
        let val_manifest = SynthSpec {
            clips_per_class: rc.val_clips_per_class,
            ..spec
        }
        .manifest();
        println!("wrote {}", val_path.display());
        print!("{val_manifest}");
        let _ = writeln!(log, "val = {}", val_path.display());
        log.push_str(&val_manifest);
    }

    finish_log(rc, log, started)?;
    Ok(0)
}

/// Runs the schedule, writes `metrics.csv` plus final and best
/// checkpoints, and exits 0 only if the final validation top-1 clears
/// `top1_floor`.
pub fn cmd_train(rc: &RunConfig) -> Result<i32> {
    let started = Instant::now();
    let cfg = rc.model_config()?;
    let tc = rc.train_config()?;
    ensure_out(rc)?;
    let mut log = log_header(rc, "train")?;

    let train_data = read_split(&cfg, &rc.data_path())?;
    let val_data = read_split(&cfg, &rc.val_data_path())?;
    let mut params = ModelParams::init(&cfg, rc.seed)?;
    let n_params = params.param_count();
    println!("parameters: {n_params}");
    let _ = writeln!(log, "parameters = {n_params}");

    let floor = (rc.top1_floor > 0.0).then_some(rc.top1_floor);
    println!("{METRICS_HEADER}");
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let outcome = trainer::train(
        &cfg,
        &tc,
        &mut params,
        &train_data,
        &val_data,
        floor,
        |row| {
            let line = row.csv_row();
            println!("{line}");
            csv.push_str(&line);
            csv.push('\n');
        },
    )?;
    write_text(&rc.out.join("metrics.csv"), &csv)?;

    let final_path = rc.checkpoint_path();
    let best_path = final_path.with_file_name("best.msfw");
    checkpoint::save(&params.set, &final_path)?;
    checkpoint::save(&outcome.best_set, &best_path)?;
    println!(
        "final val top1 {} (best {} at epoch {})",
        outcome.final_top1, outcome.best_top1, outcome.best_epoch
    );

    log.push_str(METRICS_HEADER);
    log.push('\n');
    for row in &outcome.metrics {
        log.push_str(&row.csv_row());
        log.push('\n');
    }
    let _ = writeln!(log, "best_epoch = {}", outcome.best_epoch);
    let _ = writeln!(log, "best_top1 = {}", outcome.best_top1);
    let _ = writeln!(log, "final_top1 = {}", outcome.final_top1);
    finish_log(rc, log, started)?;

    Ok(if outcome.final_top1 >= rc.top1_floor { 0 } else { 1 })
}

/// Scores a checkpoint on the named split and writes `eval.csv`.
pub fn cmd_eval(rc: &RunConfig) -> Result<i32> {
    let started = Instant::now();
    let cfg = rc.model_config()?;
    ensure_out(rc)?;
    let mut log = log_header(rc, "eval")?;

    let data = read_split(&cfg, &rc.split_data_path()?)?;
    let mut params = ModelParams::init(&cfg, rc.seed)?;
    checkpoint::load_into(&mut params.set, &rc.checkpoint_path())?;
    let n_params = params.param_count();
    println!("parameters: {n_params}");
    let _ = writeln!(log, "parameters = {n_params}");

    let (loss, top1, top5) = trainer::evaluate(&cfg, &params, &data)?;
    let row = format!("0,{},{loss},{top1},{top5},0", rc.split);
    println!("{METRICS_HEADER}");
    println!("{row}");
    write_text(
        &rc.out.join("eval.csv"),
        &format!("{METRICS_HEADER}\n{row}\n"),
    )?;
    let _ = writeln!(log, "{METRICS_HEADER}");
    let _ = writeln!(log, "{row}");
    finish_log(rc, log, started)?;
    Ok(0)
}

/// Times the scan kernels and the quadratic attention foil, then writes
/// `bench.csv` with per-length medians and fitted log-log slopes.
pub fn cmd_bench(rc: &RunConfig) -> Result<i32> {
    let started = Instant::now();
    ensure_out(rc)?;
    let mut log = log_header(rc, "bench")?;
    let threads = threads_from_env()?;
    let _ = writeln!(log, "threads = {threads}");

    let report = bench::run(&bench::default_lengths(), rc.bench_runs, threads, rc.seed)?;
    let csv = report.csv();
    print!("{csv}");
    write_text(&rc.out.join("bench.csv"), &csv)?;
    log.push_str(&csv);
    finish_log(rc, log, started)?;
    Ok(0)
}

/// Exports the fusion weights of one clip as `scale,t,h,w,weight` rows
/// followed by one per-scale mean summary line.
pub fn cmd_export_attn(rc: &RunConfig) -> Result<i32> {
    let started = Instant::now();
    let cfg = rc.model_config()?;
    if cfg.aggregate == AggregateMode::Average {
        return Err(MsfError::Config(
            "no attention in average mode; rerun with aggregate = aswm".into(),
        ));
    }
    ensure_out(rc)?;
    let mut log = log_header(rc, "export-attn")?;

    let data = read_split(&cfg, &rc.split_data_path()?)?;
    if rc.clip >= data.len() {
        return Err(MsfError::Config(format!(
            "clip index {} out of range for {} clips",
            rc.clip,
            data.len()
        )));
    }
    let mut params = ModelParams::init(&cfg, rc.seed)?;
    checkpoint::load_into(&mut params.set, &rc.checkpoint_path())?;
    let n_params = params.param_count();
    println!("parameters: {n_params}");
    let _ = writeln!(log, "parameters = {n_params}");

    let mut tape = Tape::new();
    let (_, alpha) = model::forward(&mut tape, &data[rc.clip].0, &cfg, &params)?;
    let alpha = alpha.ok_or_else(|| {
        MsfError::Contract("aswm forward returned no attention weights".into())
    })?;
    let av = tape.value(alpha).data();
    let (t_n, h_n, w_n) = cfg.grid();
    let vol = t_n * h_n * w_n;

    let mut csv = String::from("scale,t,h,w,weight\n");
    for (mi, &scale) in cfg.scales.iter().enumerate() {
        for t in 0..t_n {
            for h in 0..h_n {
                for w in 0..w_n {
                    let v = av[mi * vol + (t * h_n + h) * w_n + w];
                    let _ = writeln!(csv, "{scale},{t},{h},{w},{v:.8e}");
                }
            }
        }
    }
    for (mi, &scale) in cfg.scales.iter().enumerate() {
        let mean = av[mi * vol..(mi + 1) * vol].iter().sum::<f64>() / vol as f64;
        let line = format!("# scale {scale} mean {mean:.8e}");
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    let attn_path = rc.out.join("attn.csv");
    write_text(&attn_path, &csv)?;
    println!("wrote {}", attn_path.display());
    let _ = writeln!(log, "attention = {}", attn_path.display());
    finish_log(rc, log, started)?;
    Ok(0)
}
