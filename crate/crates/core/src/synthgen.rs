//! Deterministic synthetic micro-gesture clip generator.
//!
//! Ten motion classes, each a small soft blob following a named
//! trajectory over a textured static background. Amplitudes default to
//! two pixels so the motion stays subtle relative to the frame. In
//! motion-only mode every class shows the same blob over the same
//! anchor set and classes differ purely in the visiting order, so
//! single-frame appearance carries no label information.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MsfError, Result};
use crate::tensor::Tensor;
use crate::tokenizer::VideoClip;

pub const PATTERN_NAMES: [&str; 10] = [
    "vertical_oscillation",
    "horizontal_oscillation",
    "diagonal_oscillation",
    "circular_orbit",
    "flicker",
    "drift_up",
    "drift_down",
    "expand_contract",
    "two_phase_tap",
    "static",
];

const BLOB_RADIUS: f64 = 2.5;
const BLOB_INTENSITY: f64 = 0.7;
const CHANNEL_WEIGHTS: [f64; 3] = [0.9, 0.7, 0.5];
const TEXTURE_AMPLITUDE: f64 = 0.05;
/// Blob centers jitter at most this far from the frame center, keeping
/// placement a nuisance variable without letting it dwarf the two-pixel
/// motion signal a 200-clip training run has to pick out.
const CENTER_JITTER: f64 = 3.0;
const MAGIC: &[u8; 4] = b"MSFV";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub motion_only: bool,
    pub shuffle_frames: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            clips_per_class: 20,
            frames: 8,
            height: 32,
            width: 32,
            amplitude: 2.0,
            noise_sigma: 0.02,
            seed: 0,
            motion_only: false,
            shuffle_frames: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 10 {
            return Err(MsfError::Config(format!(
                "classes must be in 2..=10, got {}",
                self.classes
            )));
        }
        if self.frames < 3 {
            return Err(MsfError::Config(format!(
                "frames must be >= 3, got {}",
                self.frames
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(MsfError::Config(format!(
                "frame size {}x{} too small (need >= 4)",
                self.height, self.width
            )));
        }
        if !(self.amplitude > 0.0) {
            return Err(MsfError::Config(format!(
                "amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(MsfError::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if self.motion_only {
            class_orders(self.classes, self.frames)?;
        }
        Ok(())
    }

    pub fn clip_count(&self) -> usize {
        self.classes * self.clips_per_class
    }

    pub fn manifest(&self) -> String {
        let mut out = format!(
            "{} clips: {} classes x {} each, {} frames of {}x{}\n",
            self.clip_count(),
            self.classes,
            self.clips_per_class,
            self.frames,
            self.height,
            self.width
        );
        for c in 0..self.classes {
            let name = if self.motion_only {
                format!("anchor_order_{c}")
            } else {
                PATTERN_NAMES[c].to_string()
            };
            out.push_str(&format!("class {c} ({name}): {}\n", self.clips_per_class));
        }
        out
    }
}

/// Per-class anchor visiting orders for motion-only mode, a fixed pure
/// function of (classes, frames). Orders are pairwise distinct modulo
/// index rotation, since a rotated order is statistically identical to
/// the original once the per-clip phase is randomized.
pub fn class_orders(classes: usize, frames: usize) -> Result<Vec<Vec<usize>>> {
    let mut cap: usize = 1;
    for k in 2..frames {
        cap = cap.saturating_mul(k);
    }
    if classes > cap {
        return Err(MsfError::Config(format!(
            "motion-only mode with {frames} frames supports at most {cap} classes, asked for {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x4d53_465f_4f52_4452);
    let mut orders = Vec::with_capacity(classes);
    let mut taken: HashSet<Vec<usize>> = HashSet::new();
    while orders.len() < classes {
        let mut p: Vec<usize> = (0..frames).collect();
        p.shuffle(&mut rng);
        let norm: Vec<usize> = p.iter().map(|&v| (v + frames - p[0]) % frames).collect();
        if taken.insert(norm) {
            orders.push(p);
        }
    }
    Ok(orders)
}

fn clip_rng(spec: &SynthSpec, class_id: usize, index: usize) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&spec.seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(class_id as u64).to_le_bytes());
    bytes[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    bytes[24..28].copy_from_slice(MAGIC);
    ChaCha8Rng::from_seed(bytes)
}

/// Per-frame blob placement: center offsets in pixels, an intensity
/// multiplier, and a radius multiplier.
fn pattern_offsets(pattern: usize, t: usize, frames: usize, amp: f64, phase: f64) -> (f64, f64, f64, f64) {
    let tau = 2.0 * PI * t as f64 / frames as f64 + phase;
    let prog = t as f64 / (frames - 1) as f64;
    match pattern {
        0 => (0.0, amp * tau.sin(), 1.0, 1.0),
        1 => (amp * tau.sin(), 0.0, 1.0, 1.0),
        2 => {
            let s = amp * tau.sin() / std::f64::consts::SQRT_2;
            (s, s, 1.0, 1.0)
        }
        3 => (amp * tau.cos(), amp * tau.sin(), 1.0, 1.0),
        4 => (0.0, 0.0, 0.6 + 0.4 * tau.sin(), 1.0),
        5 => (0.0, amp * (1.0 - 2.0 * prog), 1.0, 1.0),
        6 => (0.0, amp * (2.0 * prog - 1.0), 1.0, 1.0),
        7 => (0.0, 0.0, 1.0, 1.0 + 0.5 * tau.sin()),
        8 => (0.0, amp * (1.0 - (2.0 * prog - 1.0).abs()), 1.0, 1.0),
        9 => (0.0, 0.0, 1.0, 1.0),
        _ => unreachable!("class_id checked by caller"),
    }
}

fn center_coord(rng: &mut ChaCha8Rng, extent: usize, margin: f64) -> f64 {
    let mid = (extent - 1) as f64 / 2.0;
    let lo = margin.max(mid - CENTER_JITTER);
    let hi = ((extent - 1) as f64 - margin).min(mid + CENTER_JITTER);
    if hi <= lo {
        mid
    } else {
        rng.gen_range(lo..hi)
    }
}

pub fn generate_clip(spec: &SynthSpec, class_id: usize, index: usize) -> Result<(VideoClip, usize)> {
    if class_id >= spec.classes {
        return Err(MsfError::Contract(format!(
            "class_id {class_id} out of range for {} classes",
            spec.classes
        )));
    }
    let (t_n, h_n, w_n) = (spec.frames, spec.height, spec.width);
    let mut rng = clip_rng(spec, class_id, index);

    let anchor_radius = 2.0 * spec.amplitude;
    let reach = if spec.motion_only {
        anchor_radius
    } else {
        spec.amplitude
    };
    let margin = reach + 2.0 * BLOB_RADIUS;
    let cx = center_coord(&mut rng, w_n, margin);
    let cy = center_coord(&mut rng, h_n, margin);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let bg_px = rng.gen_range(0.0..1.0);
    let bg_py = rng.gen_range(0.0..1.0);

    let orders = if spec.motion_only {
        Some(class_orders(spec.classes, t_n)?)
    } else {
        None
    };

    let mut frames = vec![0.0f64; t_n * h_n * w_n * 3];
    let plane = h_n * w_n * 3;
    for t in 0..t_n {
        let (dx, dy, gain, rscale) = match &orders {
            Some(orders) => {
                let k = orders[class_id][t];
                let theta = phase + 2.0 * PI * k as f64 / t_n as f64;
                (anchor_radius * theta.cos(), anchor_radius * theta.sin(), 1.0, 1.0)
            }
            None => pattern_offsets(class_id, t, t_n, spec.amplitude, phase),
        };
        let (bx, by) = (cx + dx, cy + dy);
        let inv_2r2 = 1.0 / (2.0 * (BLOB_RADIUS * rscale).powi(2));
        for h in 0..h_n {
            for w in 0..w_n {
                let texture = TEXTURE_AMPLITUDE
                    * (2.0 * PI * (w as f64 / w_n as f64 + bg_px)).sin()
                    * (2.0 * PI * (h as f64 / h_n as f64 + bg_py)).cos();
                let d2 = (w as f64 - bx).powi(2) + (h as f64 - by).powi(2);
                let blob = BLOB_INTENSITY * gain * (-d2 * inv_2r2).exp();
                for c in 0..3 {
                    let v = 0.32 + 0.02 * c as f64 + texture + blob * CHANNEL_WEIGHTS[c];
                    frames[t * plane + (h * w_n + w) * 3 + c] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
        for v in frames.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    if spec.shuffle_frames {
        let mut order: Vec<usize> = (0..t_n).collect();
        order.shuffle(&mut rng);
        let mut shuffled = vec![0.0f64; frames.len()];
        for (dst, &src) in order.iter().enumerate() {
            shuffled[dst * plane..(dst + 1) * plane]
                .copy_from_slice(&frames[src * plane..(src + 1) * plane]);
        }
        frames = shuffled;
    }

    let clip = VideoClip::new(Tensor::new(vec![t_n, h_n, w_n, 3], frames)?)?;
    Ok((clip, class_id))
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<(VideoClip, usize)>> {
    generate_dataset_range(spec, 0, spec.clips_per_class)
}

/// Clips with per-class indices in `lo..hi`. Ranges that do not overlap
/// yield disjoint splits of the same clip universe, which is how the CLI
/// carves a validation file out of the training seed.
pub fn generate_dataset_range(
    spec: &SynthSpec,
    lo: usize,
    hi: usize,
) -> Result<Vec<(VideoClip, usize)>> {
    spec.validate()?;
    check_range(lo, hi)?;
    let mut clips = Vec::with_capacity(spec.classes * (hi - lo));
    for class_id in 0..spec.classes {
        for index in lo..hi {
            clips.push(generate_clip(spec, class_id, index)?);
        }
    }
    Ok(clips)
}

fn check_range(lo: usize, hi: usize) -> Result<()> {
    if lo > hi {
        return Err(MsfError::Contract(format!(
            "inverted clip index range {lo}..{hi}"
        )));
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> MsfError {
    MsfError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_dataset(spec: &SynthSpec, path: &Path) -> Result<()> {
    write_dataset_range(spec, path, 0, spec.clips_per_class)
}

/// Streams clips with per-class indices in `lo..hi` to `path`.
pub fn write_dataset_range(spec: &SynthSpec, path: &Path, lo: usize, hi: usize) -> Result<()> {
    spec.validate()?;
    check_range(lo, hi)?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| out.write_all(bytes).map_err(|e| io_err(path, e));
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    emit(&((spec.classes * (hi - lo)) as u32).to_le_bytes())?;
    emit(&(spec.frames as u32).to_le_bytes())?;
    emit(&(spec.height as u32).to_le_bytes())?;
    emit(&(spec.width as u32).to_le_bytes())?;
    emit(&(spec.classes as u32).to_le_bytes())?;
    for class_id in 0..spec.classes {
        for index in lo..hi {
            let (clip, label) = generate_clip(spec, class_id, index)?;
            out.write_all(&(label as u16).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
            for &v in clip.frames().data() {
                out.write_all(&(v as f32).to_le_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub clip_count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

pub fn read_dataset(path: &Path) -> Result<(Vec<(VideoClip, usize)>, DatasetHeader)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |detail: &str| MsfError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not an MSFV dataset"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |input: &mut BufReader<File>| -> Result<u32> {
        input.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header = DatasetHeader {
        clip_count: read_u32(&mut input)? as usize,
        frames: read_u32(&mut input)? as usize,
        height: read_u32(&mut input)? as usize,
        width: read_u32(&mut input)? as usize,
        classes: read_u32(&mut input)? as usize,
    };
    if header.frames < 3 {
        return Err(bad(&format!("frames {} below minimum 3", header.frames)));
    }

    let numel = header.frames * header.height * header.width * 3;
    let mut clips = Vec::with_capacity(header.clip_count);
    let mut payload = vec![0u8; numel * 4];
    for _ in 0..header.clip_count {
        let mut lbuf = [0u8; 2];
        input.read_exact(&mut lbuf).map_err(|e| io_err(path, e))?;
        let label = u16::from_le_bytes(lbuf) as usize;
        if label >= header.classes {
            return Err(bad(&format!(
                "label {label} out of range for {} classes",
                header.classes
            )));
        }
        input.read_exact(&mut payload).map_err(|e| io_err(path, e))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let frames = Tensor::new(
            vec![header.frames, header.height, header.width, 3],
            data,
        )?;
        clips.push((VideoClip::new(frames)?, label));
    }
    let mut trailing = [0u8; 1];
    match input.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after last record")),
        Err(e) => return Err(io_err(path, e)),
    }
    Ok((clips, header))
}
