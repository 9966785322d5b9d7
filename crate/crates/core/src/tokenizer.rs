//! Clip-to-token conversion: non-overlapping 1 x p x p patch embedding plus
//! learned spatial and temporal positional embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MsfError, Result};
use crate::ops;
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::tensor::{shape_string, Tensor};

/// A video clip as [T, H, W, 3] values in [0, 1].
#[derive(Clone, Debug)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        match frames.shape() {
            [t, _, _, 3] if *t >= 3 => Ok(Self { frames }),
            other => Err(MsfError::Contract(format!(
                "VideoClip needs [T>=3, H, W, 3] frames, got {}",
                shape_string(other)
            ))),
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }
}

/// Token matrix [n, d] plus the (T, H', W') grid it flattens. Row
/// t*H'*W' + h*W' + w holds the token for grid cell (t, h, w).
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: (usize, usize, usize),
}

/// Learned positional embeddings, one row per spatial cell and per frame.
#[derive(Clone, Copy, Debug)]
pub struct PositionalEmbeddings {
    /// [H'*W', d]
    pub spatial: ParamId,
    /// [T, d]
    pub temporal: ParamId,
}

impl PositionalEmbeddings {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        grid: (usize, usize, usize),
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.02).unwrap();
        let (t, h, w) = grid;
        let draw = |count: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            (0..count).map(|_| normal.sample(rng)).collect()
        };
        let spatial = Tensor::new(vec![h * w, d], draw(h * w * d, rng)).unwrap();
        let temporal = Tensor::new(vec![t, d], draw(t * d, rng)).unwrap();
        Self {
            spatial: set.add(format!("{prefix}.spatial"), spatial, false),
            temporal: set.add(format!("{prefix}.temporal"), temporal, false),
        }
    }
}

/// Flatten each 1 x p x p patch (pixel-major: row, column, then channel,
/// matching frame storage) and project it to d dimensions.
pub fn patch_embed(
    tape: &mut Tape,
    clip: &VideoClip,
    patch: usize,
    proj: Var,
    bias: Var,
) -> Result<TokenSequence> {
    let (t, h, w) = clip.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(MsfError::Config(format!(
            "patch size {patch} does not divide frame size {h}x{w}"
        )));
    }
    let (hp, wp) = (h / patch, w / patch);
    let n = t * hp * wp;
    let cols = 3 * patch * patch;
    match tape.value(proj).shape() {
        [r, _] if *r == cols => {}
        other => {
            return Err(MsfError::ShapeMismatch {
                op: "patch_embed",
                expected: format!("proj [{cols}, d]"),
                actual: shape_string(other),
            })
        }
    }
    let fv = clip.frames().data();
    let mut patches = vec![0.0; n * cols];
    for ti in 0..t {
        for gh in 0..hp {
            for gw in 0..wp {
                let row = (ti * hp + gh) * wp + gw;
                let dst = &mut patches[row * cols..(row + 1) * cols];
                let mut k = 0;
                for ph in 0..patch {
                    let src_h = gh * patch + ph;
                    for pw in 0..patch {
                        let src_w = gw * patch + pw;
                        let base = ((ti * h + src_h) * w + src_w) * 3;
                        dst[k] = fv[base];
                        dst[k + 1] = fv[base + 1];
                        dst[k + 2] = fv[base + 2];
                        k += 3;
                    }
                }
            }
        }
    }
    let patches = tape.constant(Tensor::new(vec![n, cols], patches)?);
    let projected = ops::matmul(tape, patches, proj)?;
    let tokens = ops::add_bias(tape, projected, bias)?;
    Ok(TokenSequence {
        tokens,
        grid: (t, hp, wp),
    })
}

/// Z = Z_p + P_s + P_t with the embeddings broadcast over their
/// complementary axes.
pub fn add_positions(
    tape: &mut Tape,
    zp: TokenSequence,
    pe: &PositionalEmbeddings,
    set: &ParamSet,
) -> Result<TokenSequence> {
    let (t, h, w) = zp.grid;
    let ps = set.get(pe.spatial).value.shape().to_vec();
    let pt = set.get(pe.temporal).value.shape().to_vec();
    if ps.first() != Some(&(h * w)) || pt.first() != Some(&t) {
        return Err(MsfError::Config(format!(
            "positional embeddings sized {} / {} do not fit grid ({t}, {h}, {w})",
            shape_string(&ps),
            shape_string(&pt)
        )));
    }
    let psv = tape.lease(set, pe.spatial);
    let ptv = tape.lease(set, pe.temporal);
    let tokens = ops::add_positions(tape, zp.tokens, psv, ptv)?;
    Ok(TokenSequence {
        tokens,
        grid: zp.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_clip(t: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new(Tensor::zeros(&[t, h, w, 3])).unwrap()
    }

    #[test]
    fn clip_rejects_too_few_frames() {
        assert!(VideoClip::new(Tensor::zeros(&[2, 4, 4, 3])).is_err());
    }

    #[test]
    fn token_counts_match_grid_formula() {
        for (t, hw, p, expect) in [(8usize, 224usize, 16usize, 1568usize), (4, 32, 8, 64)] {
            let clip = zero_clip(t, hw, hw);
            let mut tape = Tape::new();
            let proj = tape.constant(Tensor::zeros(&[3 * p * p, 2]));
            let bias = tape.constant(Tensor::zeros(&[2]));
            let seq = patch_embed(&mut tape, &clip, p, proj, bias).unwrap();
            assert_eq!(tape.value(seq.tokens).shape()[0], expect);
            assert_eq!(seq.grid, (t, hw / p, hw / p));
        }
    }

    #[test]
    fn indivisible_frame_size_is_config_error() {
        let clip = zero_clip(3, 10, 10);
        let mut tape = Tape::new();
        let proj = tape.constant(Tensor::zeros(&[3 * 4 * 4, 2]));
        let bias = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            patch_embed(&mut tape, &clip, 4, proj, bias),
            Err(MsfError::Config(_))
        ));
    }

    #[test]
    fn zero_clip_zero_bias_gives_zero_tokens() {
        let clip = zero_clip(3, 8, 8);
        let mut tape = Tape::new();
        let proj = tape.constant(Tensor::filled(&[3 * 4 * 4, 5], 0.37));
        let bias = tape.constant(Tensor::zeros(&[5]));
        let seq = patch_embed(&mut tape, &clip, 4, proj, bias).unwrap();
        assert!(tape.value(seq.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_rows_pick_up_the_right_pixels() {
        // one white pixel at (t=1, y=2, x=5) with p=4 lands in grid cell
        // (1, 0, 1), local offset (ph=2, pw=1), red channel
        let mut frames = Tensor::zeros(&[3, 4, 8, 3]);
        frames.data_mut()[((1 * 4 + 2) * 8 + 5) * 3] = 1.0;
        let clip = VideoClip::new(frames).unwrap();
        let mut tape = Tape::new();
        // identity-ish projection: project onto the matching flat index
        let cols = 3 * 4 * 4;
        let flat = (2 * 4 + 1) * 3;
        let mut proj = Tensor::zeros(&[cols, 1]);
        proj.data_mut()[flat] = 1.0;
        let projv = tape.constant(proj);
        let bias = tape.constant(Tensor::zeros(&[1]));
        let seq = patch_embed(&mut tape, &clip, 4, projv, bias).unwrap();
        let tok = tape.value(seq.tokens).data();
        let row = (1 * 1 + 0) * 2 + 1;
        for (i, &v) in tok.iter().enumerate() {
            assert_eq!(v, if i == row { 1.0 } else { 0.0 }, "row {i}");
        }
    }

    #[test]
    fn positions_zero_embeddings_are_identity() {
        let mut set = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pe = PositionalEmbeddings::init(&mut set, "pos", (3, 2, 2), 4, &mut rng);
        set.get_mut(pe.spatial).value = Tensor::zeros(&[4, 4]);
        set.get_mut(pe.temporal).value = Tensor::zeros(&[3, 4]);
        let mut tape = Tape::new();
        let tok = tape.constant(Tensor::new(vec![12, 4], (0..48).map(|i| i as f64).collect()).unwrap());
        let seq = TokenSequence {
            tokens: tok,
            grid: (3, 2, 2),
        };
        let out = add_positions(&mut tape, seq, &pe, &set).unwrap();
        assert_eq!(tape.value(out.tokens).data(), tape.value(tok).data());
    }

    #[test]
    fn positions_grid_mismatch_is_config_error() {
        let mut set = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pe = PositionalEmbeddings::init(&mut set, "pos", (3, 2, 2), 4, &mut rng);
        let mut tape = Tape::new();
        let tok = tape.constant(Tensor::zeros(&[8, 4]));
        let seq = TokenSequence {
            tokens: tok,
            grid: (2, 2, 2),
        };
        assert!(matches!(
            add_positions(&mut tape, seq, &pe, &set),
            Err(MsfError::Config(_))
        ));
    }
}
