//! Spatio-temporal convolutions over [channels, T, H, W] grids.
//!
//! Two flavors: a single w×w×w kernel applied identically to every channel
//! (the windowed aggregation S_k), and a full cross-channel convolution with
//! per-output bias (the attention network). Both use zero padding of radius
//! (w-1)/2 so shapes are preserved, and both are differentiable.

use crate::error::{MsfError, Result};
use crate::ops::{matmul_nt_raw, matmul_raw, matmul_tn_raw};
use crate::tape::{out_grad, Tape, Var};
use crate::tensor::{shape_string, Tensor};

fn grid_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [c, tt, h, w] => Ok((*c, *tt, *h, *w)),
        other => Err(MsfError::ShapeMismatch {
            op,
            expected: "[channels, T, H, W]".to_string(),
            actual: shape_string(other),
        }),
    }
}

fn check_odd_window(w: usize) -> Result<usize> {
    if w == 0 || w % 2 == 0 {
        return Err(MsfError::Config(format!(
            "convolution window must be odd and positive, got {w}"
        )));
    }
    Ok((w - 1) / 2)
}

/// Shared-kernel forward on a raw channel-major buffer.
fn conv_shared_raw(
    x: &[f64],
    kernel: &[f64],
    d: usize,
    t: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f64],
) {
    let pad = (k - 1) / 2;
    let vol = t * h * w;
    for c in 0..d {
        let xc = &x[c * vol..(c + 1) * vol];
        let oc = &mut out[c * vol..(c + 1) * vol];
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..w {
                    let mut acc = 0.0;
                    for dt in 0..k {
                        let st = it + dt;
                        if st < pad || st - pad >= t {
                            continue;
                        }
                        let st = st - pad;
                        for dh in 0..k {
                            let sh = ih + dh;
                            if sh < pad || sh - pad >= h {
                                continue;
                            }
                            let sh = sh - pad;
                            for dw in 0..k {
                                let sw = iw + dw;
                                if sw < pad || sw - pad >= w {
                                    continue;
                                }
                                let sw = sw - pad;
                                acc += kernel[(dt * k + dh) * k + dw]
                                    * xc[(st * h + sh) * w + sw];
                            }
                        }
                    }
                    oc[(it * h + ih) * w + iw] += acc;
                }
            }
        }
    }
}

/// Convolve every channel of `x` with one shared odd-sized cubic kernel,
/// zero-padded so the grid shape is preserved.
pub fn conv3d_shared(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    let (d, t, h, w) = grid_dims("conv3d_shared", tape.value(x))?;
    let kshape = tape.value(kernel).shape().to_vec();
    let k = match kshape.as_slice() {
        [a, b, c] if a == b && b == c => *a,
        other => {
            return Err(MsfError::ShapeMismatch {
                op: "conv3d_shared",
                expected: "[w, w, w]".to_string(),
                actual: shape_string(other),
            })
        }
    };
    let pad = check_odd_window(k)?;
    let mut data = vec![0.0; d * t * h * w];
    conv_shared_raw(
        tape.value(x).data(),
        tape.value(kernel).data(),
        d,
        t,
        h,
        w,
        k,
        &mut data,
    );
    let out = tape.push_node(Tensor::new(vec![d, t, h, w], data)?);
    let (xi, ki, oi) = (x.0, kernel.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let xv = vals[xi].data();
        let kv = vals[ki].data();
        let vol = t * h * w;
        {
            let gk = &mut lo[ki];
            for c in 0..d {
                let xc = &xv[c * vol..(c + 1) * vol];
                let gc = &g[c * vol..(c + 1) * vol];
                for it in 0..t {
                    for ih in 0..h {
                        for iw in 0..w {
                            let go = gc[(it * h + ih) * w + iw];
                            for dt in 0..k {
                                let st = it + dt;
                                if st < pad || st - pad >= t {
                                    continue;
                                }
                                let st = st - pad;
                                for dh in 0..k {
                                    let sh = ih + dh;
                                    if sh < pad || sh - pad >= h {
                                        continue;
                                    }
                                    let sh = sh - pad;
                                    for dw in 0..k {
                                        let sw = iw + dw;
                                        if sw < pad || sw - pad >= w {
                                            continue;
                                        }
                                        let sw = sw - pad;
                                        gk[(dt * k + dh) * k + dw] +=
                                            go * xc[(st * h + sh) * w + sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let gx = &mut lo[xi];
            for c in 0..d {
                let gxc = &mut gx[c * vol..(c + 1) * vol];
                let gc = &g[c * vol..(c + 1) * vol];
                for it in 0..t {
                    for ih in 0..h {
                        for iw in 0..w {
                            let go = gc[(it * h + ih) * w + iw];
                            for dt in 0..k {
                                let st = it + dt;
                                if st < pad || st - pad >= t {
                                    continue;
                                }
                                let st = st - pad;
                                for dh in 0..k {
                                    let sh = ih + dh;
                                    if sh < pad || sh - pad >= h {
                                        continue;
                                    }
                                    let sh = sh - pad;
                                    for dw in 0..k {
                                        let sw = iw + dw;
                                        if sw < pad || sw - pad >= w {
                                            continue;
                                        }
                                        let sw = sw - pad;
                                        gxc[(st * h + sh) * w + sw] +=
                                            go * kv[(dt * k + dh) * k + dw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Unfold `x` into the [cin·k³, vol] patch matrix used by the full conv.
/// Row order is (input channel, dt, dh, dw); out-of-range reads yield zero.
fn im2col(
    x: &[f64],
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    k: usize,
    cols: &mut [f64],
) {
    let pad = (k - 1) / 2;
    let vol = t * h * w;
    debug_assert_eq!(cols.len(), cin * k * k * k * vol);
    for c in 0..cin {
        let xc = &x[c * vol..(c + 1) * vol];
        for dt in 0..k {
            for dh in 0..k {
                for dw in 0..k {
                    let row = ((c * k + dt) * k + dh) * k + dw;
                    let dst = &mut cols[row * vol..(row + 1) * vol];
                    for it in 0..t {
                        let st = it + dt;
                        if st < pad || st - pad >= t {
                            for ih in 0..h {
                                for iw in 0..w {
                                    dst[(it * h + ih) * w + iw] = 0.0;
                                }
                            }
                            continue;
                        }
                        let st = st - pad;
                        for ih in 0..h {
                            let sh = ih + dh;
                            if sh < pad || sh - pad >= h {
                                for iw in 0..w {
                                    dst[(it * h + ih) * w + iw] = 0.0;
                                }
                                continue;
                            }
                            let sh = sh - pad;
                            for iw in 0..w {
                                let sw = iw + dw;
                                if sw < pad || sw - pad >= w {
                                    dst[(it * h + ih) * w + iw] = 0.0;
                                } else {
                                    dst[(it * h + ih) * w + iw] =
                                        xc[(st * h + sh) * w + sw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input grid.
fn col2im_add(
    gcols: &[f64],
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    k: usize,
    gx: &mut [f64],
) {
    let pad = (k - 1) / 2;
    let vol = t * h * w;
    for c in 0..cin {
        let gxc = &mut gx[c * vol..(c + 1) * vol];
        for dt in 0..k {
            for dh in 0..k {
                for dw in 0..k {
                    let row = ((c * k + dt) * k + dh) * k + dw;
                    let src = &gcols[row * vol..(row + 1) * vol];
                    for it in 0..t {
                        let st = it + dt;
                        if st < pad || st - pad >= t {
                            continue;
                        }
                        let st = st - pad;
                        for ih in 0..h {
                            let sh = ih + dh;
                            if sh < pad || sh - pad >= h {
                                continue;
                            }
                            let sh = sh - pad;
                            for iw in 0..w {
                                let sw = iw + dw;
                                if sw < pad || sw - pad >= w {
                                    continue;
                                }
                                gxc[(st * h + sh) * w + sw - pad] +=
                                    src[(it * h + ih) * w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Full cross-channel convolution with per-output-channel bias: weights
/// [cout, cin, k, k, k], zero padding, shape-preserving. Implemented as
/// im2col + matrix product; the patch matrix is rebuilt in the backward
/// pass instead of being captured.
pub fn conv3d_full(tape: &mut Tape, x: Var, weights: Var, bias: Var) -> Result<Var> {
    let (cin, t, h, w) = grid_dims("conv3d_full", tape.value(x))?;
    let wshape = tape.value(weights).shape().to_vec();
    let (cout, k) = match wshape.as_slice() {
        [o, i, a, b, c] if i == &cin && a == b && b == c => (*o, *a),
        other => {
            return Err(MsfError::ShapeMismatch {
                op: "conv3d_full",
                expected: format!("[cout, {cin}, k, k, k]"),
                actual: shape_string(other),
            })
        }
    };
    check_odd_window(k)?;
    if tape.value(bias).shape() != [cout] {
        return Err(MsfError::ShapeMismatch {
            op: "conv3d_full",
            expected: format!("[{cout}]"),
            actual: shape_string(tape.value(bias).shape()),
        });
    }
    let vol = t * h * w;
    let kk = cin * k * k * k;
    let mut cols = vec![0.0; kk * vol];
    im2col(tape.value(x).data(), cin, t, h, w, k, &mut cols);
    let mut data = vec![0.0; cout * vol];
    matmul_raw(tape.value(weights).data(), &cols, cout, kk, vol, &mut data);
    let bv = tape.value(bias).data();
    for o in 0..cout {
        let b = bv[o];
        for v in data[o * vol..(o + 1) * vol].iter_mut() {
            *v += b;
        }
    }
    let out = tape.push_node(Tensor::new(vec![cout, t, h, w], data)?);
    let (xi, wi, bi, oi) = (x.0, weights.0, bias.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let mut cols = vec![0.0; kk * vol];
        im2col(vals[xi].data(), cin, t, h, w, k, &mut cols);
        matmul_nt_raw(g, &cols, cout, vol, kk, &mut lo[wi]);
        {
            let gb = &mut lo[bi];
            for o in 0..cout {
                gb[o] += g[o * vol..(o + 1) * vol].iter().sum::<f64>();
            }
        }
        let mut gcols = vec![0.0; kk * vol];
        matmul_tn_raw(vals[wi].data(), g, cout, kk, vol, &mut gcols);
        col2im_add(&gcols, cin, t, h, w, k, &mut lo[xi]);
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_kernel(k: usize) -> Tensor {
        let mut data = vec![0.0; k * k * k];
        let c = (k - 1) / 2;
        data[(c * k + c) * k + c] = 1.0;
        Tensor::new(vec![k, k, k], data).unwrap()
    }

    #[test]
    fn shared_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64) * 0.1 - 3.0).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 4, 4], data.clone()).unwrap());
        let k = tape.constant(delta_kernel(3));
        let y = conv3d_shared(&mut tape, x, k).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn shared_ones_kernel_interior_voxel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 5, 5, 5], 5.0));
        let k = tape.constant(Tensor::filled(&[3, 3, 3], 1.0));
        let y = conv3d_shared(&mut tape, x, k).unwrap();
        // interior voxel sees the full 27-cell neighborhood
        let idx = (2 * 5 + 2) * 5 + 2;
        assert_eq!(tape.value(y).data()[idx], 135.0);
    }

    #[test]
    fn shared_rejects_even_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let k = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(matches!(
            conv3d_shared(&mut tape, x, k),
            Err(MsfError::Config(_))
        ));
    }

    #[test]
    fn full_conv_bias_only_path() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3, 3]));
        let b = tape.constant(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let y = conv3d_full(&mut tape, x, w, b).unwrap();
        let yv = tape.value(y).data();
        let vol = 2 * 3 * 3;
        for o in 0..4 {
            let expect = [1.0, -2.0, 0.5, 3.0][o];
            assert!(yv[o * vol..(o + 1) * vol].iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn full_conv_k1_is_channel_mix() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        // out = 10*ch0 + 100*ch1
        let w = tape.constant(Tensor::new(vec![1, 2, 1, 1, 1], vec![10.0, 100.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv3d_full(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[310.0, 420.0]);
    }

    /// Direct six-deep summation, independent of the im2col path.
    fn full_conv_oracle(
        x: &Tensor,
        wt: &Tensor,
        b: &Tensor,
    ) -> Vec<f64> {
        let (cin, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (wt.shape()[0], wt.shape()[2]);
        let pad = (k - 1) / 2;
        let vol = t * h * w;
        let mut out = vec![0.0; cout * vol];
        for o in 0..cout {
            for it in 0..t as isize {
                for ih in 0..h as isize {
                    for iw in 0..w as isize {
                        let mut acc = b.data()[o];
                        for ic in 0..cin {
                            for dt in 0..k as isize {
                                for dh in 0..k as isize {
                                    for dw in 0..k as isize {
                                        let (st, sh, sw) = (
                                            it + dt - pad as isize,
                                            ih + dh - pad as isize,
                                            iw + dw - pad as isize,
                                        );
                                        if st < 0
                                            || sh < 0
                                            || sw < 0
                                            || st >= t as isize
                                            || sh >= h as isize
                                            || sw >= w as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ic * t + st as usize) * h + sh as usize) * w
                                            + sw as usize;
                                        let wi = (((o * cin + ic) * k + dt as usize) * k
                                            + dh as usize)
                                            * k
                                            + dw as usize;
                                        acc += wt.data()[wi] * x.data()[xi];
                                    }
                                }
                            }
                        }
                        out[(o * (t * h) as usize + (it * h as isize + ih) as usize) * w
                            + iw as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn full_conv_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (cin, cout, t, h, w, k) = (
                rng.gen_range(1..4usize),
                rng.gen_range(1..4usize),
                rng.gen_range(1..4usize),
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
                [1usize, 3][rng.gen_range(0..2usize)],
            );
            let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
                let n: usize = shape.iter().product();
                Tensor::new(
                    shape.to_vec(),
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let x = rand_t(&mut rng, &[cin, t, h, w]);
            let wt = rand_t(&mut rng, &[cout, cin, k, k, k]);
            let b = rand_t(&mut rng, &[cout]);
            let expect = full_conv_oracle(&x, &wt, &b);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(b));
            let y = conv3d_full(&mut tape, xv, wv, bv).unwrap();
            let got = tape.value(y).data();
            let max: f64 = got
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "full conv mismatch {max}");
        }
    }
}
