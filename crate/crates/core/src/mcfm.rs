//! Motion-aware multiscale state fusion.
//!
//! Token states are reshaped into a [d, T, H', W'] grid, a frame-difference
//! motion field D is extracted, and each configured window size produces a
//! fused grid S_k(F) + theta_k * S_k(D) where S_k is the shared-kernel
//! windowed aggregation and theta_k a sigmoid-bounded gate.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::conv3d_shared;
use crate::error::{MsfError, Result};
use crate::ops;
use crate::tape::{out_grad, ParamId, ParamSet, Tape, Var};
use crate::tensor::{shape_string, Tensor};
use crate::tokenizer::TokenSequence;

/// How the motion field is computed before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionMode {
    Central,
    FirstOrder,
    None,
}

impl std::str::FromStr for MotionMode {
    type Err = MsfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(Self::Central),
            "first_order" => Ok(Self::FirstOrder),
            "none" => Ok(Self::None),
            other => Err(MsfError::Config(format!(
                "unknown motion_mode '{other}' (expected central, first_order, or none)"
            ))),
        }
    }
}

impl std::fmt::Display for MotionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Central => "central",
            Self::FirstOrder => "first_order",
            Self::None => "none",
        })
    }
}

/// One fusion scale: an odd window, its shared kernel, and the gate logit.
#[derive(Clone, Copy, Debug)]
pub struct ScaleSpec {
    pub window: usize,
    pub kernel: ParamId,
    pub gate_logit: ParamId,
}

impl ScaleSpec {
    /// Kernel starts as identity plus small noise so early training matches
    /// a pass-through; the gate logit starts at 0, i.e. theta = 0.5.
    pub fn init(set: &mut ParamSet, prefix: &str, window: usize, rng: &mut impl Rng) -> Result<Self> {
        if window % 2 == 0 || window == 0 {
            return Err(MsfError::Config(format!(
                "scale window must be odd, got {window}"
            )));
        }
        let normal = Normal::new(0.0, 0.01).unwrap();
        let mut kernel = Tensor::zeros(&[window, window, window]);
        for v in kernel.data_mut().iter_mut() {
            *v = normal.sample(rng);
        }
        let mid = (window - 1) / 2;
        kernel.data_mut()[(mid * window + mid) * window + mid] += 1.0;
        Ok(Self {
            window,
            kernel: set.add(format!("{prefix}.kernel"), kernel, true),
            gate_logit: set.add(
                format!("{prefix}.gate_logit"),
                Tensor::zeros(&[1]),
                false,
            ),
        })
    }
}

fn grid_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [d, tt, h, w] => Ok((*d, *tt, *h, *w)),
        other => Err(MsfError::ShapeMismatch {
            op,
            expected: "[d, T, H, W]".to_string(),
            actual: shape_string(other),
        }),
    }
}

/// Reshape [n, d] tokens into the [d, T, H', W'] latent grid, with
/// value[c,t,h,w] = tokens[t*H'*W' + h*W' + w, c].
pub fn reshape_to_grid(tape: &mut Tape, seq: TokenSequence) -> Result<Var> {
    let (t, h, w) = seq.grid;
    let shape = tape.value(seq.tokens).shape().to_vec();
    if shape.len() != 2 || shape[0] != t * h * w {
        return Err(MsfError::Contract(format!(
            "token count {} does not match grid ({t}, {h}, {w})",
            shape.first().copied().unwrap_or(0)
        )));
    }
    let d = shape[1];
    let transposed = ops::transpose(tape, seq.tokens)?;
    ops::reshape(tape, transposed, &[d, t, h, w])
}

/// Flatten a latent grid back to [n, d] tokens in the declared row order.
pub fn grid_to_tokens(tape: &mut Tape, grid: Var) -> Result<Var> {
    let (d, t, h, w) = grid_dims("grid_to_tokens", tape.value(grid))?;
    let flat = ops::reshape(tape, grid, &[d, t * h * w])?;
    ops::transpose(tape, flat)
}

/// Central frame difference D_t = F_t - (F_{t-1} + F_{t+1})/2 with
/// replicate padding in time, so D_0 = (F_0 - F_1)/2 and
/// D_{T-1} = (F_{T-1} - F_{T-2})/2.
pub fn central_frame_diff(tape: &mut Tape, f: Var) -> Result<Var> {
    let (d, t, h, w) = grid_dims("central_frame_diff", tape.value(f))?;
    if t < 3 {
        return Err(MsfError::Contract(format!(
            "central_frame_diff needs T >= 3, got {t}"
        )));
    }
    let vol = h * w;
    let x = tape.value(f).data();
    let mut data = vec![0.0; d * t * vol];
    for c in 0..d {
        let base = c * t * vol;
        for ti in 0..t {
            let (prev, next) = (ti.saturating_sub(1), (ti + 1).min(t - 1));
            let cur = &x[base + ti * vol..base + (ti + 1) * vol];
            let pv = &x[base + prev * vol..base + (prev + 1) * vol];
            let nv = &x[base + next * vol..base + (next + 1) * vol];
            let dst = &mut data[base + ti * vol..base + (ti + 1) * vol];
            for i in 0..vol {
                dst[i] = cur[i] - 0.5 * (pv[i] + nv[i]);
            }
        }
    }
    let out = tape.push_node(Tensor::new(vec![d, t, h, w], data)?);
    let (fi, oi) = (f.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let gf = &mut lo[fi];
        for c in 0..d {
            let base = c * t * vol;
            for ti in 0..t {
                let (prev, next) = (ti.saturating_sub(1), (ti + 1).min(t - 1));
                let go = &g[base + ti * vol..base + (ti + 1) * vol];
                for i in 0..vol {
                    gf[base + ti * vol + i] += go[i];
                    gf[base + prev * vol + i] -= 0.5 * go[i];
                    gf[base + next * vol + i] -= 0.5 * go[i];
                }
            }
        }
    });
    Ok(out)
}

/// First-order difference D_t = F_t - F_{t-1} with D_0 = 0.
pub fn first_order_diff(tape: &mut Tape, f: Var) -> Result<Var> {
    let (d, t, h, w) = grid_dims("first_order_diff", tape.value(f))?;
    if t < 2 {
        return Err(MsfError::Contract(format!(
            "first_order_diff needs T >= 2, got {t}"
        )));
    }
    let vol = h * w;
    let x = tape.value(f).data();
    let mut data = vec![0.0; d * t * vol];
    for c in 0..d {
        let base = c * t * vol;
        for ti in 1..t {
            let cur = &x[base + ti * vol..base + (ti + 1) * vol];
            let pv = &x[base + (ti - 1) * vol..base + ti * vol];
            let dst = &mut data[base + ti * vol..base + (ti + 1) * vol];
            for i in 0..vol {
                dst[i] = cur[i] - pv[i];
            }
        }
    }
    let out = tape.push_node(Tensor::new(vec![d, t, h, w], data)?);
    let (fi, oi) = (f.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let gf = &mut lo[fi];
        for c in 0..d {
            let base = c * t * vol;
            for ti in 1..t {
                let go = &g[base + ti * vol..base + (ti + 1) * vol];
                for i in 0..vol {
                    gf[base + ti * vol + i] += go[i];
                    gf[base + (ti - 1) * vol + i] -= go[i];
                }
            }
        }
    });
    Ok(out)
}

/// F^(k) = S_k(F) + theta_k * S_k(D).
pub fn fuse_scale(
    tape: &mut Tape,
    f: Var,
    dmotion: Var,
    spec: &ScaleSpec,
    set: &ParamSet,
) -> Result<Var> {
    if tape.value(f).shape() != tape.value(dmotion).shape() {
        return Err(MsfError::ShapeMismatch {
            op: "fuse_scale",
            expected: shape_string(tape.value(f).shape()),
            actual: shape_string(tape.value(dmotion).shape()),
        });
    }
    let kernel = tape.lease(set, spec.kernel);
    let gate = tape.lease(set, spec.gate_logit);
    let sf = conv3d_shared(tape, f, kernel)?;
    let sd = conv3d_shared(tape, dmotion, kernel)?;
    let theta = ops::sigmoid(tape, gate);
    let gated = ops::mul_bcast_scalar(tape, sd, theta)?;
    ops::add(tape, sf, gated)
}

/// Reshape tokens, extract the motion field, and fuse every scale.
/// Returns one grid per spec, in spec order.
pub fn mcfm_forward(
    tape: &mut Tape,
    seq: TokenSequence,
    specs: &[ScaleSpec],
    mode: MotionMode,
    set: &ParamSet,
) -> Result<Vec<Var>> {
    if specs.is_empty() {
        return Err(MsfError::Config("mcfm needs at least one scale".into()));
    }
    let f = reshape_to_grid(tape, seq)?;
    let dmotion = match mode {
        MotionMode::Central => central_frame_diff(tape, f)?,
        MotionMode::FirstOrder => first_order_diff(tape, f)?,
        MotionMode::None => {
            let shape = tape.value(f).shape().to_vec();
            tape.constant(Tensor::zeros(&shape))
        }
    };
    specs
        .iter()
        .map(|spec| fuse_scale(tape, f, dmotion, spec, set))
        .collect()
}
