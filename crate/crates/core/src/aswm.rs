//! Adaptive scale weighting over a bank of per-scale fused grids.
//!
//! The bank is concatenated along channels and pushed through two stacked
//! convolutions (3^3 cross-channel, ReLU, then 1^3 down to one logit per
//! scale); a softmax across the scale axis yields per-location weights used
//! for a convex combination of the bank. An unweighted average is available
//! as the ablation fallback.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::conv3d_full;
use crate::error::{MsfError, Result};
use crate::ops;
use crate::tape::{out_grad, ParamId, ParamSet, Tape, Var};
use crate::tensor::{shape_string, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateMode {
    Aswm,
    Average,
}

impl std::str::FromStr for AggregateMode {
    type Err = MsfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aswm" => Ok(Self::Aswm),
            "average" => Ok(Self::Average),
            other => Err(MsfError::Config(format!(
                "unknown aggregate mode '{other}' (expected aswm or average)"
            ))),
        }
    }
}

impl std::fmt::Display for AggregateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Aswm => "aswm",
            Self::Average => "average",
        })
    }
}

/// Attention-network parameters. conv2 starts at exactly zero so the
/// initial weights are uniform and the module begins as an average-sum.
#[derive(Clone, Copy, Debug)]
pub struct AswmParams {
    /// [hidden, M*d, 3, 3, 3]
    pub conv1_w: ParamId,
    /// [hidden]
    pub conv1_b: ParamId,
    /// [M, hidden, 1, 1, 1]
    pub conv2_w: ParamId,
    /// [M]
    pub conv2_b: ParamId,
}

impl AswmParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        d: usize,
        scales: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.02).unwrap();
        let hidden = d;
        let w1_count = hidden * scales * d * 27;
        let w1 = Tensor::new(
            vec![hidden, scales * d, 3, 3, 3],
            (0..w1_count).map(|_| normal.sample(rng)).collect(),
        )
        .unwrap();
        Self {
            conv1_w: set.add(format!("{prefix}.conv1_w"), w1, true),
            conv1_b: set.add(format!("{prefix}.conv1_b"), Tensor::zeros(&[hidden]), false),
            conv2_w: set.add(
                format!("{prefix}.conv2_w"),
                Tensor::zeros(&[scales, hidden, 1, 1, 1]),
                true,
            ),
            conv2_b: set.add(format!("{prefix}.conv2_b"), Tensor::zeros(&[scales]), false),
        }
    }
}

fn bank_dims(op: &'static str, tape: &Tape, bank: &[Var]) -> Result<(usize, usize, usize, usize)> {
    let first = match bank.first() {
        Some(v) => tape.value(*v).shape().to_vec(),
        None => return Err(MsfError::Contract(format!("{op}: empty scale bank"))),
    };
    let dims = match first.as_slice() {
        [d, t, h, w] => (*d, *t, *h, *w),
        other => {
            return Err(MsfError::ShapeMismatch {
                op,
                expected: "[d, T, H, W]".to_string(),
                actual: shape_string(other),
            })
        }
    };
    for v in bank {
        if tape.value(*v).shape() != first.as_slice() {
            return Err(MsfError::Contract(format!(
                "{op}: bank grids disagree on shape ({} vs {})",
                shape_string(&first),
                shape_string(tape.value(*v).shape())
            )));
        }
    }
    Ok(dims)
}

/// Concatenate the bank along channels and run the two-layer attention
/// network, producing one logit per scale per location.
pub fn attention_logits(
    tape: &mut Tape,
    bank: &[Var],
    p: &AswmParams,
    set: &ParamSet,
) -> Result<Var> {
    let (d, t, h, w) = bank_dims("attention_logits", tape, bank)?;
    let m = bank.len();
    let mut flat = Vec::with_capacity(m);
    for &g in bank {
        flat.push(ops::reshape(tape, g, &[d, t * h * w])?);
    }
    let stacked = ops::concat_rows(tape, &flat)?;
    let stacked = ops::reshape(tape, stacked, &[m * d, t, h, w])?;
    let w1 = tape.lease(set, p.conv1_w);
    let b1 = tape.lease(set, p.conv1_b);
    let hid = conv3d_full(tape, stacked, w1, b1)?;
    let hid = ops::relu(tape, hid);
    let w2 = tape.lease(set, p.conv2_w);
    let b2 = tape.lease(set, p.conv2_b);
    conv3d_full(tape, hid, w2, b2)
}

/// Softmax across the scale axis, independently at every location.
pub fn normalize_scales(tape: &mut Tape, logits: Var) -> Result<Var> {
    ops::softmax_axis0(tape, logits)
}

/// F_final[c, v] = sum_m alpha[m, v] * bank[m][c, v].
pub fn weighted_sum(tape: &mut Tape, bank: &[Var], alpha: Var) -> Result<Var> {
    let (d, t, h, w) = bank_dims("weighted_sum", tape, bank)?;
    let m = bank.len();
    let vol = t * h * w;
    if tape.value(alpha).shape() != [m, t, h, w] {
        return Err(MsfError::ShapeMismatch {
            op: "weighted_sum",
            expected: format!("[{m}, {t}, {h}, {w}]"),
            actual: shape_string(tape.value(alpha).shape()),
        });
    }
    let av = tape.value(alpha).data();
    let mut data = vec![0.0; d * vol];
    for (mi, &g) in bank.iter().enumerate() {
        let gv = tape.value(g).data();
        let arow = &av[mi * vol..(mi + 1) * vol];
        for c in 0..d {
            let grow = &gv[c * vol..(c + 1) * vol];
            let dst = &mut data[c * vol..(c + 1) * vol];
            for i in 0..vol {
                dst[i] += arow[i] * grow[i];
            }
        }
    }
    let out = tape.push_node(Tensor::new(vec![d, t, h, w], data)?);
    let idxs: Vec<usize> = bank.iter().map(|v| v.0).collect();
    let (ai, oi) = (alpha.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let av = vals[ai].data();
        for (mi, &gi) in idxs.iter().enumerate() {
            let arow = &av[mi * vol..(mi + 1) * vol];
            let fv = vals[gi].data();
            {
                let gbank = &mut lo[gi];
                for c in 0..d {
                    let go = &g[c * vol..(c + 1) * vol];
                    let dst = &mut gbank[c * vol..(c + 1) * vol];
                    for i in 0..vol {
                        dst[i] += arow[i] * go[i];
                    }
                }
            }
            {
                let galpha = &mut lo[ai];
                for c in 0..d {
                    let go = &g[c * vol..(c + 1) * vol];
                    let frow = &fv[c * vol..(c + 1) * vol];
                    for i in 0..vol {
                        galpha[mi * vol + i] += go[i] * frow[i];
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Run the configured aggregation. ASWM mode returns the attention weights
/// for export; average mode returns none.
pub fn aggregate(
    tape: &mut Tape,
    bank: &[Var],
    params: Option<&AswmParams>,
    mode: AggregateMode,
    set: &ParamSet,
) -> Result<(Var, Option<Var>)> {
    bank_dims("aggregate", tape, bank)?;
    match mode {
        AggregateMode::Average => {
            let mut acc = bank[0];
            for &g in &bank[1..] {
                acc = ops::add(tape, acc, g)?;
            }
            Ok((ops::scale(tape, acc, 1.0 / bank.len() as f64), None))
        }
        AggregateMode::Aswm => {
            let p = params.ok_or_else(|| {
                MsfError::Config("aswm aggregation requires attention parameters".into())
            })?;
            let logits = attention_logits(tape, bank, p, set)?;
            let alpha = normalize_scales(tape, logits)?;
            let fused = weighted_sum(tape, bank, alpha)?;
            Ok((fused, Some(alpha)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_bank(
        tape: &mut Tape,
        m: usize,
        d: usize,
        t: usize,
        h: usize,
        w: usize,
        seed: u64,
    ) -> Vec<Var> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| {
                let count = d * t * h * w;
                let data: Vec<f64> = (0..count)
                    .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                    .collect();
                tape.constant(Tensor::new(vec![d, t, h, w], data).unwrap())
            })
            .collect()
    }

    #[test]
    fn zero_init_aswm_equals_average_sum() {
        let mut set = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let p = AswmParams::init(&mut set, "aswm", 3, 3, &mut rng);
        let mut tape = Tape::new();
        let bank = random_bank(&mut tape, 3, 3, 2, 2, 2, 9);
        let (fused, alpha) = aggregate(&mut tape, &bank, Some(&p), AggregateMode::Aswm, &set).unwrap();
        let (avg, none) = aggregate(&mut tape, &bank, None, AggregateMode::Average, &set).unwrap();
        assert!(none.is_none());
        assert!(tape.value(fused).max_abs_diff(tape.value(avg)) < 1e-12);
        let av = tape.value(alpha.unwrap()).data();
        assert!(av.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn alpha_sums_to_one_everywhere() {
        let mut set = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let p = AswmParams::init(&mut set, "aswm", 2, 3, &mut rng);
        // non-trivial second layer so the logits vary
        for v in set.get_mut(p.conv2_w).value.data_mut().iter_mut() {
            *v = rand::Rng::gen_range(&mut rng, -0.5..0.5);
        }
        let mut tape = Tape::new();
        let bank = random_bank(&mut tape, 3, 2, 2, 3, 2, 10);
        let (_, alpha) = aggregate(&mut tape, &bank, Some(&p), AggregateMode::Aswm, &set).unwrap();
        let av = tape.value(alpha.unwrap()).data().to_vec();
        let vol = 2 * 3 * 2;
        for i in 0..vol {
            let s: f64 = (0..3).map(|m| av[m * vol + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for m in 0..3 {
                let a = av[m * vol + i];
                assert!(a > 0.0 && a < 1.0);
            }
        }
    }

    #[test]
    fn one_hot_alpha_selects_a_grid() {
        let mut tape = Tape::new();
        let bank = random_bank(&mut tape, 2, 2, 1, 2, 2, 11);
        let vol = 4;
        let mut alpha = Tensor::zeros(&[2, 1, 2, 2]);
        for i in 0..vol {
            alpha.data_mut()[vol + i] = 1.0;
        }
        let a = tape.constant(alpha);
        let y = weighted_sum(&mut tape, &bank, a).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(bank[1]).data());
    }

    #[test]
    fn average_of_g_and_neg_g_is_zero() {
        let mut tape = Tape::new();
        let g = random_bank(&mut tape, 1, 2, 2, 2, 2, 12)[0];
        let neg = ops::scale(&mut tape, g, -1.0);
        let set = ParamSet::new();
        let (avg, _) = aggregate(&mut tape, &[g, neg], None, AggregateMode::Average, &set).unwrap();
        assert!(tape.value(avg).data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn single_scale_aswm_weights_are_one() {
        let mut set = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let p = AswmParams::init(&mut set, "aswm", 2, 1, &mut rng);
        // arbitrary non-zero second layer: softmax of one logit is still 1
        for v in set.get_mut(p.conv2_w).value.data_mut().iter_mut() {
            *v = 0.7;
        }
        let mut tape = Tape::new();
        let bank = random_bank(&mut tape, 1, 2, 2, 2, 2, 13);
        let (fused, alpha) = aggregate(&mut tape, &bank, Some(&p), AggregateMode::Aswm, &set).unwrap();
        assert!(tape.value(alpha.unwrap()).data().iter().all(|&a| a == 1.0));
        assert!(tape.value(fused).max_abs_diff(tape.value(bank[0])) < 1e-15);
    }

    #[test]
    fn missing_params_in_aswm_mode_is_config_error() {
        let mut tape = Tape::new();
        let bank = random_bank(&mut tape, 2, 1, 1, 1, 1, 14);
        let set = ParamSet::new();
        assert!(matches!(
            aggregate(&mut tape, &bank, None, AggregateMode::Aswm, &set),
            Err(MsfError::Config(_))
        ));
    }

    #[test]
    fn output_is_convex_combination() {
        let mut set = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
        let p = AswmParams::init(&mut set, "aswm", 2, 3, &mut rng);
        for v in set.get_mut(p.conv2_w).value.data_mut().iter_mut() {
            *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        let mut tape = Tape::new();
        let bank = random_bank(&mut tape, 3, 2, 2, 2, 2, 15);
        let (fused, _) = aggregate(&mut tape, &bank, Some(&p), AggregateMode::Aswm, &set).unwrap();
        let fv = tape.value(fused).data();
        for (i, &v) in fv.iter().enumerate() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &g in &bank {
                let x = tape.value(g).data()[i];
                lo = lo.min(x);
                hi = hi.max(x);
            }
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn average_equals_forced_uniform_alpha() {
        let mut tape = Tape::new();
        let bank = random_bank(&mut tape, 3, 2, 2, 2, 2, 16);
        let set = ParamSet::new();
        let (avg, _) = aggregate(&mut tape, &bank, None, AggregateMode::Average, &set).unwrap();
        let uniform = tape.constant(Tensor::filled(&[3, 2, 2, 2], 1.0 / 3.0));
        let forced = weighted_sum(&mut tape, &bank, uniform).unwrap();
        assert!(tape.value(avg).max_abs_diff(tape.value(forced)) < 1e-12);
    }
}
