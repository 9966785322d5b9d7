//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its forward value eagerly, pushes the
//! result onto the tape, and registers a backward closure. Closures read node
//! values through the tape's value slice, so they capture only indices, small
//! metadata, and whatever intermediate state would be expensive to recompute.

use crate::error::{MsfError, Result};
use crate::tape::{out_grad, Tape, Var};
use crate::tensor::{shape_string, Tensor};

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MsfError::ShapeMismatch {
            op,
            expected: shape_string(a.shape()),
            actual: shape_string(b.shape()),
        });
    }
    Ok(())
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(MsfError::ShapeMismatch {
            op,
            expected: "[rows, cols]".to_string(),
            actual: shape_string(other),
        }),
    }
}

/// Row-block size for the cache tiling below. Each output element still
/// accumulates its terms in plain ascending index order, so tiling never
/// changes a single bit of the result.
const MM_BLOCK: usize = 256;

/// C += A(m,k) * B(k,n), row-major, accumulating into `out`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + MM_BLOCK).min(k);
        for i in 0..m {
            let arow = &a[i * k + k0..i * k + k1];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[(k0 + kk) * n..(k0 + kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        k0 = k1;
    }
}

/// Dot product with eight independent accumulator lanes so the loop
/// vectorizes without needing float reassociation from the compiler.
#[inline]
pub(crate) fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let av = &a[c * 8..c * 8 + 8];
        let bv = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += av[l] * bv[l];
        }
    }
    let mut acc = lanes.iter().sum::<f64>();
    for i in chunks * 8..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// C += A(m,n) * B(j,n)^T, i.e. C[i][j] = dot(A row i, B row j).
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, j: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), j * n);
    debug_assert_eq!(out.len(), m * j);
    let mut j0 = 0;
    while j0 < j {
        let j1 = (j0 + MM_BLOCK).min(j);
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for jj in j0..j1 {
                let brow = &b[jj * n..(jj + 1) * n];
                out[i * j + jj] += dot_lanes(arow, brow);
            }
        }
        j0 = j1;
    }
}

/// C += A(m,k)^T * G(m,n), so C has shape (k,n).
pub(crate) fn matmul_tn_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut i0 = 0;
    while i0 < k {
        let i1 = (i0 + MM_BLOCK).min(k);
        for t in 0..m {
            let arow = &a[t * k + i0..t * k + i1];
            let grow = &g[t * n..(t + 1) * n];
            for (off, &av) in arow.iter().enumerate() {
                let orow = &mut out[(i0 + off) * n..(i0 + off + 1) * n];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        i0 = i1;
    }
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    require_same_shape("add", tape.value(a), tape.value(b))?;
    let data: Vec<f64> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x + y)
        .collect();
    let out = tape.push_node(Tensor::new(tape.value(a).shape().to_vec(), data)?);
    let (ai, bi, oi) = (a.0, b.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        for (ga, &gv) in lo[ai].iter_mut().zip(g) {
            *ga += gv;
        }
        for (gb, &gv) in lo[bi].iter_mut().zip(g) {
            *gb += gv;
        }
    });
    Ok(out)
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    require_same_shape("sub", tape.value(a), tape.value(b))?;
    let data: Vec<f64> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x - y)
        .collect();
    let out = tape.push_node(Tensor::new(tape.value(a).shape().to_vec(), data)?);
    let (ai, bi, oi) = (a.0, b.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        for (ga, &gv) in lo[ai].iter_mut().zip(g) {
            *ga += gv;
        }
        for (gb, &gv) in lo[bi].iter_mut().zip(g) {
            *gb -= gv;
        }
    });
    Ok(out)
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    require_same_shape("mul", tape.value(a), tape.value(b))?;
    let data: Vec<f64> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x * y)
        .collect();
    let out = tape.push_node(Tensor::new(tape.value(a).shape().to_vec(), data)?);
    let (ai, bi, oi) = (a.0, b.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        {
            let bv = vals[bi].data();
            let ga = &mut lo[ai];
            for i in 0..g.len() {
                ga[i] += g[i] * bv[i];
            }
        }
        {
            let av = vals[ai].data();
            let gb = &mut lo[bi];
            for i in 0..g.len() {
                gb[i] += g[i] * av[i];
            }
        }
    });
    Ok(out)
}

/// Multiply by a compile-time-known scalar constant.
pub fn scale(tape: &mut Tape, v: Var, k: f64) -> Var {
    let data: Vec<f64> = tape.value(v).data().iter().map(|x| x * k).collect();
    let out = tape.push_node(Tensor::new(tape.value(v).shape().to_vec(), data).unwrap());
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        for (gv, &go) in lo[vi].iter_mut().zip(g) {
            *gv += k * go;
        }
    });
    out
}

/// Broadcast-multiply a tensor by a single-element tensor variable.
pub fn mul_bcast_scalar(tape: &mut Tape, t: Var, s: Var) -> Result<Var> {
    if tape.value(s).numel() != 1 {
        return Err(MsfError::ShapeMismatch {
            op: "mul_bcast_scalar",
            expected: "single element".to_string(),
            actual: shape_string(tape.value(s).shape()),
        });
    }
    let sv = tape.value(s).data()[0];
    let data: Vec<f64> = tape.value(t).data().iter().map(|x| x * sv).collect();
    let out = tape.push_node(Tensor::new(tape.value(t).shape().to_vec(), data)?);
    let (ti, si, oi) = (t.0, s.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let sv = vals[si].data()[0];
        {
            let gt = &mut lo[ti];
            for (gv, &go) in gt.iter_mut().zip(g) {
                *gv += sv * go;
            }
        }
        let tv = vals[ti].data();
        let mut acc = 0.0;
        for (x, &go) in tv.iter().zip(g) {
            acc += x * go;
        }
        lo[si][0] += acc;
    });
    Ok(out)
}

/// Sum of all entries, as a scalar node.
pub fn sum(tape: &mut Tape, v: Var) -> Var {
    let total: f64 = tape.value(v).data().iter().sum();
    let out = tape.push_node(Tensor::scalar(total));
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let gv = g[0];
        for x in lo[vi].iter_mut() {
            *x += gv;
        }
    });
    out
}

/// Mean over all trailing axes: [lead, ...] -> [lead].
pub fn mean_trailing(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    if shape.len() < 2 {
        return Err(MsfError::ShapeMismatch {
            op: "mean_trailing",
            expected: "rank >= 2".to_string(),
            actual: shape_string(&shape),
        });
    }
    let lead = shape[0];
    let tail: usize = shape[1..].iter().product();
    let data = tape.value(v).data();
    let mut out = vec![0.0; lead];
    for l in 0..lead {
        let row = &data[l * tail..(l + 1) * tail];
        out[l] = row.iter().sum::<f64>() / tail as f64;
    }
    let out = tape.push_node(Tensor::new(vec![lead], out)?);
    let (vi, oi) = (v.0, out.0);
    let inv = 1.0 / tail as f64;
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let gv = &mut lo[vi];
        for l in 0..lead {
            let go = g[l] * inv;
            for x in gv[l * tail..(l + 1) * tail].iter_mut() {
                *x += go;
            }
        }
    });
    Ok(out)
}

pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (m, k) = require_rank2("matmul", tape.value(a))?;
    let (k2, n) = require_rank2("matmul", tape.value(b))?;
    if k != k2 {
        return Err(MsfError::ShapeMismatch {
            op: "matmul",
            expected: format!("[{m}, {k}] x [{k}, n]"),
            actual: format!("[{m}, {k}] x [{k2}, {n}]"),
        });
    }
    let mut data = vec![0.0; m * n];
    matmul_raw(tape.value(a).data(), tape.value(b).data(), m, k, n, &mut data);
    let out = tape.push_node(Tensor::new(vec![m, n], data)?);
    let (ai, bi, oi) = (a.0, b.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        matmul_nt_raw(g, vals[bi].data(), m, n, k, &mut lo[ai]);
        matmul_tn_raw(vals[ai].data(), g, m, k, n, &mut lo[bi]);
    });
    Ok(out)
}

/// x[m,n] + b[n], broadcast over rows.
pub fn add_bias(tape: &mut Tape, x: Var, b: Var) -> Result<Var> {
    let (m, n) = require_rank2("add_bias", tape.value(x))?;
    if tape.value(b).shape() != [n] {
        return Err(MsfError::ShapeMismatch {
            op: "add_bias",
            expected: format!("[{n}]"),
            actual: shape_string(tape.value(b).shape()),
        });
    }
    let bv = tape.value(b).data().to_vec();
    let mut data = tape.value(x).data().to_vec();
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] += bv[j];
        }
    }
    let out = tape.push_node(Tensor::new(vec![m, n], data)?);
    let (xi, bi, oi) = (x.0, b.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        for (gx, &gv) in lo[xi].iter_mut().zip(g) {
            *gx += gv;
        }
        let gb = &mut lo[bi];
        for i in 0..m {
            for j in 0..n {
                gb[j] += g[i * n + j];
            }
        }
    });
    Ok(out)
}

pub fn softplus(tape: &mut Tape, v: Var) -> Var {
    let data: Vec<f64> = tape
        .value(v)
        .data()
        .iter()
        .map(|&x| softplus_scalar(x))
        .collect();
    let out = tape.push_node(Tensor::new(tape.value(v).shape().to_vec(), data).unwrap());
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let xv = vals[vi].data();
        let gv = &mut lo[vi];
        for i in 0..g.len() {
            gv[i] += g[i] * sigmoid_scalar(xv[i]);
        }
    });
    out
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(tape: &mut Tape, v: Var) -> Var {
    let data: Vec<f64> = tape.value(v).data().iter().map(|&x| sigmoid_scalar(x)).collect();
    let out = tape.push_node(Tensor::new(tape.value(v).shape().to_vec(), data).unwrap());
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let yv = vals[oi].data();
        let gv = &mut lo[vi];
        for i in 0..g.len() {
            gv[i] += g[i] * yv[i] * (1.0 - yv[i]);
        }
    });
    out
}

/// Rectified linear unit. The subgradient at exactly zero is taken as zero.
pub fn relu(tape: &mut Tape, v: Var) -> Var {
    let data: Vec<f64> = tape.value(v).data().iter().map(|&x| x.max(0.0)).collect();
    let out = tape.push_node(Tensor::new(tape.value(v).shape().to_vec(), data).unwrap());
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let xv = vals[vi].data();
        let gv = &mut lo[vi];
        for i in 0..g.len() {
            if xv[i] > 0.0 {
                gv[i] += g[i];
            }
        }
    });
    out
}

/// Softmax across axis 0 of a [M, ...] tensor, independently per trailing
/// position. Shift-stabilized by the per-position maximum.
pub fn softmax_axis0(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    if shape.is_empty() || shape[0] == 0 {
        return Err(MsfError::ShapeMismatch {
            op: "softmax_axis0",
            expected: "[M, ...] with M >= 1".to_string(),
            actual: shape_string(&shape),
        });
    }
    let m = shape[0];
    let tail: usize = shape[1..].iter().product::<usize>().max(1);
    let x = tape.value(v).data();
    let mut data = vec![0.0; x.len()];
    for p in 0..tail {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..m {
            mx = mx.max(x[i * tail + p]);
        }
        let mut denom = 0.0;
        for i in 0..m {
            let e = (x[i * tail + p] - mx).exp();
            data[i * tail + p] = e;
            denom += e;
        }
        for i in 0..m {
            data[i * tail + p] /= denom;
        }
    }
    let out = tape.push_node(Tensor::new(shape, data)?);
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let y = vals[oi].data();
        let gv = &mut lo[vi];
        for p in 0..tail {
            let mut dot = 0.0;
            for i in 0..m {
                dot += g[i * tail + p] * y[i * tail + p];
            }
            for i in 0..m {
                gv[i * tail + p] += y[i * tail + p] * (g[i * tail + p] - dot);
            }
        }
    });
    Ok(out)
}

/// Per-row layer normalization with learned scale and shift.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let (n, d) = require_rank2("layer_norm", tape.value(x))?;
    if tape.value(gamma).shape() != [d] || tape.value(beta).shape() != [d] {
        return Err(MsfError::ShapeMismatch {
            op: "layer_norm",
            expected: format!("gamma/beta [{d}]"),
            actual: format!(
                "{} / {}",
                shape_string(tape.value(gamma).shape()),
                shape_string(tape.value(beta).shape())
            ),
        });
    }
    let xv = tape.value(x).data();
    let gv = tape.value(gamma).data().to_vec();
    let bv = tape.value(beta).data().to_vec();
    let mut data = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    let mut means = vec![0.0; n];
    for i in 0..n {
        let row = &xv[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        means[i] = mu;
        inv_std[i] = is;
        for j in 0..d {
            data[i * d + j] = gv[j] * (row[j] - mu) * is + bv[j];
        }
    }
    let out = tape.push_node(Tensor::new(vec![n, d], data)?);
    let (xi, gi, bi, oi) = (x.0, gamma.0, beta.0, out.0);
    tape.push_backward(move |vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let xv = vals[xi].data();
        let gammav = vals[gi].data();
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let grow = &g[i * d..(i + 1) * d];
            let mu = means[i];
            let is = inv_std[i];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let xhat = (row[j] - mu) * is;
                let dxhat = grow[j] * gammav[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            let inv_d = 1.0 / d as f64;
            {
                let gx = &mut lo[xi];
                for j in 0..d {
                    let xhat = (row[j] - mu) * is;
                    let dxhat = grow[j] * gammav[j];
                    gx[i * d + j] +=
                        is * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                }
            }
            {
                let gg = &mut lo[gi];
                for j in 0..d {
                    let xhat = (row[j] - mu) * is;
                    gg[j] += grow[j] * xhat;
                }
            }
            {
                let gb = &mut lo[bi];
                for j in 0..d {
                    gb[j] += grow[j];
                }
            }
        }
    });
    Ok(out)
}

/// Reverse the row order of a rank-2 tensor.
pub fn flip_rows(tape: &mut Tape, v: Var) -> Result<Var> {
    let (n, d) = require_rank2("flip_rows", tape.value(v))?;
    let x = tape.value(v).data();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        data[i * d..(i + 1) * d].copy_from_slice(&x[(n - 1 - i) * d..(n - i) * d]);
    }
    let out = tape.push_node(Tensor::new(vec![n, d], data)?);
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let gv = &mut lo[vi];
        for i in 0..n {
            for j in 0..d {
                gv[(n - 1 - i) * d + j] += g[i * d + j];
            }
        }
    });
    Ok(out)
}

/// Transpose a rank-2 tensor.
pub fn transpose(tape: &mut Tape, v: Var) -> Result<Var> {
    let (r, c) = require_rank2("transpose", tape.value(v))?;
    let x = tape.value(v).data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x[i * c + j];
        }
    }
    let out = tape.push_node(Tensor::new(vec![c, r], data)?);
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let gv = &mut lo[vi];
        for i in 0..r {
            for j in 0..c {
                gv[i * c + j] += g[j * r + i];
            }
        }
    });
    Ok(out)
}

/// Reinterpret the shape without moving data.
pub fn reshape(tape: &mut Tape, v: Var, shape: &[usize]) -> Result<Var> {
    let numel: usize = shape.iter().product();
    if numel != tape.value(v).numel() {
        return Err(MsfError::ShapeMismatch {
            op: "reshape",
            expected: format!("{} elements", tape.value(v).numel()),
            actual: shape_string(shape),
        });
    }
    let data = tape.value(v).data().to_vec();
    let out = tape.push_node(Tensor::new(shape.to_vec(), data)?);
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        for (gv, &go) in lo[vi].iter_mut().zip(g) {
            *gv += go;
        }
    });
    Ok(out)
}

/// Stack rank-2 tensors with equal column counts along axis 0.
pub fn concat_rows(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(MsfError::Contract("concat_rows needs at least one input".into()));
    }
    let (_, cols) = require_rank2("concat_rows", tape.value(parts[0]))?;
    let mut row_counts = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for &p in parts {
        let (r, c) = require_rank2("concat_rows", tape.value(p))?;
        if c != cols {
            return Err(MsfError::ShapeMismatch {
                op: "concat_rows",
                expected: format!("[_, {cols}]"),
                actual: format!("[{r}, {c}]"),
            });
        }
        row_counts.push(r);
        data.extend_from_slice(tape.value(p).data());
    }
    let total: usize = row_counts.iter().sum();
    let out = tape.push_node(Tensor::new(vec![total, cols], data)?);
    let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
    let oi = out.0;
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let mut offset = 0;
        for (&pi, &r) in idxs.iter().zip(&row_counts) {
            let len = r * cols;
            for (gv, &go) in lo[pi].iter_mut().zip(&g[offset..offset + len]) {
                *gv += go;
            }
            offset += len;
        }
    });
    Ok(out)
}

/// Add spatial and temporal positional embeddings to a token sequence.
///
/// Token i covers spatial cell i % hw of frame i / hw, so it receives
/// `ps[i % hw]` and `pt[i / hw]`.
pub fn add_positions(tape: &mut Tape, tokens: Var, ps: Var, pt: Var) -> Result<Var> {
    let (n, d) = require_rank2("add_positions", tape.value(tokens))?;
    let (hw, d1) = require_rank2("add_positions", tape.value(ps))?;
    let (t, d2) = require_rank2("add_positions", tape.value(pt))?;
    if d1 != d || d2 != d || hw == 0 || n != t * hw {
        return Err(MsfError::ShapeMismatch {
            op: "add_positions",
            expected: format!("tokens [T*hw, {d}], ps [hw, {d}], pt [T, {d}]"),
            actual: format!("tokens [{n}, {d}], ps [{hw}, {d1}], pt [{t}, {d2}]"),
        });
    }
    let psv = tape.value(ps).data();
    let ptv = tape.value(pt).data();
    let mut data = tape.value(tokens).data().to_vec();
    for i in 0..n {
        let s = i % hw;
        let f = i / hw;
        for j in 0..d {
            data[i * d + j] += psv[s * d + j] + ptv[f * d + j];
        }
    }
    let out = tape.push_node(Tensor::new(vec![n, d], data)?);
    let (xi, pi, ti, oi) = (tokens.0, ps.0, pt.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        for (gx, &gv) in lo[xi].iter_mut().zip(g) {
            *gx += gv;
        }
        {
            let gp = &mut lo[pi];
            for i in 0..n {
                let s = i % hw;
                for j in 0..d {
                    gp[s * d + j] += g[i * d + j];
                }
            }
        }
        {
            let gt = &mut lo[ti];
            for i in 0..n {
                let f = i / hw;
                for j in 0..d {
                    gt[f * d + j] += g[i * d + j];
                }
            }
        }
    });
    Ok(out)
}

/// Repeat a single-column tensor [n, 1] across `d` columns.
pub fn broadcast_col(tape: &mut Tape, v: Var, d: usize) -> Result<Var> {
    let (n, one) = require_rank2("broadcast_col", tape.value(v))?;
    if one != 1 || d == 0 {
        return Err(MsfError::ShapeMismatch {
            op: "broadcast_col",
            expected: "[n, 1] -> d >= 1 columns".to_string(),
            actual: format!("[{n}, {one}] -> {d}"),
        });
    }
    let x = tape.value(v).data();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] = x[i];
        }
    }
    let out = tape.push_node(Tensor::new(vec![n, d], data)?);
    let (vi, oi) = (v.0, out.0);
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let gv = &mut lo[vi];
        for i in 0..n {
            gv[i] += g[i * d..(i + 1) * d].iter().sum::<f64>();
        }
    });
    Ok(out)
}

/// Mean cross-entropy between logits [B, C] and integer labels, using a
/// shift-stabilized log-sum-exp.
pub fn cross_entropy_mean(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (bsz, classes) = require_rank2("cross_entropy_mean", tape.value(logits))?;
    if labels.len() != bsz {
        return Err(MsfError::Contract(format!(
            "cross_entropy_mean: {} labels for {} logit rows",
            labels.len(),
            bsz
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MsfError::Contract(format!(
            "cross_entropy_mean: label {bad} out of range for {classes} classes"
        )));
    }
    let x = tape.value(logits).data();
    let mut probs = vec![0.0; bsz * classes];
    let mut total = 0.0;
    for i in 0..bsz {
        let row = &x[i * classes..(i + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..classes {
            let e = (row[j] - mx).exp();
            probs[i * classes + j] = e;
            denom += e;
        }
        for j in 0..classes {
            probs[i * classes + j] /= denom;
        }
        let lse = mx + denom.ln();
        total += lse - row[labels[i]];
    }
    let out = tape.push_node(Tensor::scalar(total / bsz as f64));
    let (li, oi) = (logits.0, out.0);
    let labels = labels.to_vec();
    tape.push_backward(move |_vals, grads| {
        let (lo, g) = out_grad(grads, oi);
        let go = g[0] / bsz as f64;
        let gl = &mut lo[li];
        for i in 0..bsz {
            for j in 0..classes {
                let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                gl[i * classes + j] += go * (probs[i * classes + j] - indicator);
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{finite_diff_check, ParamId, ParamSet};

    fn param_vec(values: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add(
            "p0",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
            true,
        );
        ps
    }

    #[test]
    fn matmul_matches_hand_computed() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
        let c = matmul(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matmul(&mut tape, a, b).is_err());
    }

    #[test]
    fn softmax_axis0_columns_sum_to_one() {
        let mut tape = Tape::new();
        let v = tape.constant(
            Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.7 - 3.0).collect()).unwrap(),
        );
        let s = softmax_axis0(&mut tape, v).unwrap();
        let y = tape.value(s).data();
        for p in 0..4 {
            let col: f64 = (0..3).map(|m| y[m * 4 + p]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis0_handles_large_logits() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![2, 1], vec![1000.0, 1001.0]).unwrap());
        let s = softmax_axis0(&mut tape, v).unwrap();
        let y = tape.value(s).data();
        assert!(y.iter().all(|p| p.is_finite()));
        assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 10]));
        let loss = cross_entropy_mean(&mut tape, logits, &[3]).unwrap();
        assert!((tape.value(loss).item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let mut tape = Tape::new();
        let logits =
            tape.constant(Tensor::new(vec![1, 3], vec![10000.0, -10000.0, 9999.0]).unwrap());
        let loss = cross_entropy_mean(&mut tape, logits, &[0]).unwrap();
        assert!(tape.value(loss).item().is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(cross_entropy_mean(&mut tape, logits, &[3]).is_err());
    }

    #[test]
    fn flip_rows_is_involution() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let f = flip_rows(&mut tape, v).unwrap();
        let ff = flip_rows(&mut tape, f).unwrap();
        assert_eq!(tape.value(ff).data(), tape.value(v).data());
    }

    #[test]
    fn layer_norm_output_row_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 7.0]).unwrap());
        let gamma = tape.constant(Tensor::filled(&[4], 1.0));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let y = layer_norm(&mut tape, x, gamma, beta, 1e-5).unwrap();
        let yv = tape.value(y).data();
        for i in 0..2 {
            let row = &yv[i * 4..(i + 1) * 4];
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn add_positions_broadcast_pattern() {
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::zeros(&[4, 1]));
        let ps = tape.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let pt = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let y = add_positions(&mut tape, tokens, ps, pt).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 21.0, 12.0, 22.0]);
    }

    #[test]
    fn elementwise_ops_finite_diff() {
        let mut params = param_vec(&[0.5, -1.2, 2.0, 0.01]);
        let err = finite_diff_check(
            |tape, ps| {
                let v = tape.lease(ps, ParamId(0));
                let a = softplus(tape, v);
                let b = sigmoid(tape, v);
                let c = mul(tape, a, b)?;
                let d = relu(tape, c);
                Ok(sum(tape, d))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "elementwise fd error {err}");
    }

    #[test]
    fn transpose_round_trip_preserves_grad() {
        let mut params = param_vec(&[1.0, -2.0, 3.0, -4.0, 5.0, -6.0]);
        let err = finite_diff_check(
            |tape, ps| {
                let v = tape.lease(ps, ParamId(0));
                let m = reshape(tape, v, &[2, 3])?;
                let t = transpose(tape, m)?;
                let sq = mul(tape, t, t)?;
                Ok(sum(tape, sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "transpose fd error {err}");
    }
}
