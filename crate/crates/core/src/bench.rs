//! Wall-clock complexity measurements for the scan kernels.
//!
//! Times scan_sequential, scan_chunked, and a deliberately quadratic
//! single-head attention foil over a range of sequence lengths, then
//! fits log-log slopes. The foil streams one score row at a time so its
//! memory stays linear while its arithmetic stays O(n^2).

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MsfError, Result};
use crate::ssm::{scan_chunked, scan_sequential_plain};
use crate::tensor::Tensor;

const SCAN_D: usize = 8;
const SCAN_N_STATE: usize = 8;
const FOIL_DK: usize = 8;
const CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub n: usize,
    pub median_secs: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub scan_slope: f64,
    pub chunked_slope: f64,
    pub foil_slope: f64,
    /// chunked / sequential median wall-clock at the largest n.
    pub chunk_ratio_at_max: f64,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("kernel,n,median_secs\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.kernel, row.n, row.median_secs));
        }
        out.push_str(&format!("slope,scan_sequential,{}\n", self.scan_slope));
        out.push_str(&format!("slope,scan_chunked,{}\n", self.chunked_slope));
        out.push_str(&format!("slope,attention_foil,{}\n", self.foil_slope));
        out.push_str(&format!(
            "ratio,chunked_over_sequential_at_max,{}\n",
            self.chunk_ratio_at_max
        ));
        out
    }
}

/// Sequence lengths 256, 512, ..., 16384.
pub fn default_lengths() -> Vec<usize> {
    (0..7).map(|i| 256usize << i).collect()
}

/// Least-squares slope of ln(seconds) against ln(n).
pub fn fit_loglog_slope(points: &[(usize, f64)]) -> f64 {
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.max(1e-9).ln()).collect();
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - xbar) * (y - ybar);
        den += (x - xbar) * (x - xbar);
    }
    num / den
}

/// Naive softmax attention with one query row in flight at a time.
pub fn attention_foil(q: &[f64], k: &[f64], v: &[f64], n: usize, dk: usize, out: &mut [f64]) {
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let qi = &q[i * dk..(i + 1) * dk];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            let kj = &k[j * dk..(j + 1) * dk];
            let mut s = 0.0;
            for a in 0..dk {
                s += qi[a] * kj[a];
            }
            scores[j] = s;
            if s > mx {
                mx = s;
            }
        }
        let mut z = 0.0;
        for sc in scores.iter_mut() {
            *sc = (*sc - mx).exp();
            z += *sc;
        }
        let o = &mut out[i * dk..(i + 1) * dk];
        o.fill(0.0);
        for j in 0..n {
            let w = scores[j] / z;
            let vj = &v[j * dk..(j + 1) * dk];
            for a in 0..dk {
                o[a] += w * vj[a];
            }
        }
    }
}

fn time_median(runs: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

pub fn run(lengths: &[usize], runs: usize, threads: usize, seed: u64) -> Result<BenchReport> {
    if lengths.len() < 2 {
        return Err(MsfError::Config(
            "bench needs at least two sequence lengths for a slope".into(),
        ));
    }
    if runs == 0 {
        return Err(MsfError::Config("bench needs runs >= 1".into()));
    }
    let n_max = *lengths.iter().max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dn = SCAN_D * SCAN_N_STATE;
    let a_all: Vec<f64> = (0..n_max * dn).map(|_| rng.gen_range(0.01..0.99)).collect();
    let b_all: Vec<f64> = (0..n_max * dn).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c_all: Vec<f64> = (0..n_max * SCAN_N_STATE)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let x_all: Vec<f64> = (0..n_max * SCAN_D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let skip = Tensor::new(
        vec![SCAN_D],
        (0..SCAN_D).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let q_all: Vec<f64> = (0..n_max * FOIL_DK).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k_all: Vec<f64> = (0..n_max * FOIL_DK).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v_all: Vec<f64> = (0..n_max * FOIL_DK).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut rows = Vec::new();
    let mut seq_points = Vec::new();
    let mut chunk_points = Vec::new();
    let mut foil_points = Vec::new();
    let mut seq_at_max = 0.0;
    let mut chunk_at_max = 0.0;

    for &n in lengths {
        let a_bar = Tensor::new(vec![n, SCAN_D, SCAN_N_STATE], a_all[..n * dn].to_vec())?;
        let b_bar_x = Tensor::new(vec![n, SCAN_D, SCAN_N_STATE], b_all[..n * dn].to_vec())?;
        let c = Tensor::new(vec![n, SCAN_N_STATE], c_all[..n * SCAN_N_STATE].to_vec())?;
        let x = Tensor::new(vec![n, SCAN_D], x_all[..n * SCAN_D].to_vec())?;

        let t_seq = time_median(runs, || {
            let y = scan_sequential_plain(&a_bar, &b_bar_x, &c, &skip, &x).unwrap();
            black_box(&y);
        });
        rows.push(BenchRow {
            kernel: "scan_sequential",
            n,
            median_secs: t_seq,
        });
        seq_points.push((n, t_seq));

        let t_chunk = time_median(runs, || {
            let y = scan_chunked(&a_bar, &b_bar_x, &c, &skip, &x, CHUNK, threads).unwrap();
            black_box(&y);
        });
        rows.push(BenchRow {
            kernel: "scan_chunked",
            n,
            median_secs: t_chunk,
        });
        chunk_points.push((n, t_chunk));

        let q = &q_all[..n * FOIL_DK];
        let kk = &k_all[..n * FOIL_DK];
        let vv = &v_all[..n * FOIL_DK];
        let mut out = vec![0.0; n * FOIL_DK];
        let t_foil = time_median(runs, || {
            attention_foil(q, kk, vv, n, FOIL_DK, &mut out);
            black_box(&out);
        });
        rows.push(BenchRow {
            kernel: "attention_foil",
            n,
            median_secs: t_foil,
        });
        foil_points.push((n, t_foil));

        if n == n_max {
            seq_at_max = t_seq;
            chunk_at_max = t_chunk;
        }
    }

    Ok(BenchReport {
        rows,
        scan_slope: fit_loglog_slope(&seq_points),
        chunked_slope: fit_loglog_slope(&chunk_points),
        foil_slope: fit_loglog_slope(&foil_points),
        chunk_ratio_at_max: chunk_at_max / seq_at_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fit_recovers_exact_power_laws() {
        let linear: Vec<(usize, f64)> = (1..8).map(|i| (256 << i, 1e-6 * (256 << i) as f64)).collect();
        assert!((fit_loglog_slope(&linear) - 1.0).abs() < 1e-9);
        let quadratic: Vec<(usize, f64)> = (1..8)
            .map(|i| {
                let n = 256usize << i;
                (n, 1e-9 * (n as f64) * (n as f64))
            })
            .collect();
        assert!((fit_loglog_slope(&quadratic) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn foil_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 17;
        let q: Vec<f64> = (0..n * FOIL_DK).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..n * FOIL_DK).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n * FOIL_DK).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; n * FOIL_DK];
        attention_foil(&q, &k, &v, n, FOIL_DK, &mut out);
        for a in 0..FOIL_DK {
            let lo = (0..n).map(|j| v[j * FOIL_DK + a]).fold(f64::INFINITY, f64::min);
            let hi = (0..n)
                .map(|j| v[j * FOIL_DK + a])
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let o = out[i * FOIL_DK + a];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn foil_with_uniform_scores_averages_values() {
        let n = 5;
        let q = vec![0.0; n * FOIL_DK];
        let k = vec![0.0; n * FOIL_DK];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..n * FOIL_DK).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; n * FOIL_DK];
        attention_foil(&q, &k, &v, n, FOIL_DK, &mut out);
        for a in 0..FOIL_DK {
            let mean = (0..n).map(|j| v[j * FOIL_DK + a]).sum::<f64>() / n as f64;
            for i in 0..n {
                assert!((out[i * FOIL_DK + a] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_bench_produces_full_report() {
        let report = run(&[64, 128, 256], 3, 1, 9).unwrap();
        assert_eq!(report.rows.len(), 9);
        assert!(report.rows.iter().all(|r| r.median_secs >= 0.0));
        let csv = report.csv();
        assert!(csv.starts_with("kernel,n,median_secs\n"));
        assert_eq!(csv.lines().count(), 1 + 9 + 4);
    }

    #[test]
    fn bench_rejects_degenerate_requests() {
        assert!(run(&[256], 3, 1, 0).is_err());
        assert!(run(&[256, 512], 0, 1, 0).is_err());
    }
}
