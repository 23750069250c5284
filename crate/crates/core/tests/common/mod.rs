//! Helpers shared by the integration tests: seeded inputs, brute-force
//! oracles, gradient-check suites and the longer run protocols.

#![allow(dead_code)]

pub mod grad;
pub mod runs;

use mocgvq::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in `[-1, 1)`.
pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries uniform in `[lo, hi)`.
pub fn random_in(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn unit_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let n = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// One pass/fail line per acceptance criterion.
pub fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:>2} {name}: {detail}");
}

// ---------------------------------------------------------------------------
// brute-force oracles

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest row by scanning every distance; first minimum wins.
pub fn exhaustive_nearest(z: &[f64], codebook: &Tensor) -> usize {
    let d: Vec<f64> = (0..codebook.rows()).map(|i| sq_dist(z, codebook.row(i))).collect();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    d.iter().position(|&v| v == min).unwrap()
}

/// Quantized output recomputed from scores: repeated argmax for the
/// active set, score-normalized weights, exhaustive code lookups.
pub fn rederive_quantized(h: &Tensor, scores: &Tensor, codes: &Tensor, m: usize, k: usize, top: usize) -> Tensor {
    let mut out = Tensor::zeros(h.rows(), h.cols());
    for r in 0..h.rows() {
        let mut left: Vec<usize> = (0..m).collect();
        let mut chosen = Vec::new();
        for _ in 0..top {
            let mut best = 0;
            for (pos, &c) in left.iter().enumerate() {
                if scores.get(r, c) > scores.get(r, left[best]) {
                    best = pos;
                }
            }
            chosen.push(left.remove(best));
        }
        let total: f64 = chosen.iter().map(|&c| scores.get(r, c)).sum();
        for &c in &chosen {
            let book = Tensor::from_rows(&(0..k).map(|i| codes.row(c * k + i).to_vec()).collect::<Vec<_>>()).unwrap();
            let i = exhaustive_nearest(h.row(r), &book);
            let w = scores.get(r, c) / total;
            for (o, v) in out.row_mut(r).iter_mut().zip(book.row(i)) {
                *o += w * v;
            }
        }
    }
    out
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Triple-contrastive value by direct summation of exponentials, self terms
/// included.
pub fn naive_contrastive(h: &Tensor, z: &Tensor, tau: f64) -> f64 {
    let n = h.rows();
    let mut total = 0.0;
    for i in 0..n {
        let num = (cos(h.row(i), z.row(i)) / tau).exp();
        let mut den = 0.0;
        for j in 0..n {
            den += (cos(h.row(i), z.row(j)) / tau).exp();
            den += (cos(h.row(i), h.row(j)) / tau).exp();
            den += (cos(z.row(i), z.row(j)) / tau).exp();
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

/// Domain cross-entropy of normalized scores by direct summation.
pub fn naive_load(scores: &Tensor, domains: &[usize]) -> f64 {
    let n = scores.rows();
    let mut total = 0.0;
    for (r, &d) in domains.iter().enumerate() {
        let s = scores.row(r);
        let sum: f64 = s.iter().sum();
        for (m, v) in s.iter().enumerate() {
            let y = if m == d { 1.0 } else { 0.0 };
            total -= y * (v / sum).max(1e-12).ln();
        }
    }
    total / n as f64
}

/// Mean angle over unordered pairs of rows, computed pair by pair.
pub fn mean_pairwise_angle(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            sum += cos(x.row(i), x.row(j)).clamp(-1.0, 1.0).acos();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Population covariance by explicit double loop.
pub fn naive_covariance(x: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = x.shape();
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for (a, row) in cov.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = (0..n).map(|r| (x.get(r, a) - mean[a]) * (x.get(r, b) - mean[b])).sum::<f64>() / n as f64;
        }
    }
    cov
}

/// Leading eigenvector by plain power iteration from the all-ones start.
pub fn power_iteration_oracle(m: &[Vec<f64>], iters: usize) -> Vec<f64> {
    let d = m.len();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..iters {
        let mut next: Vec<f64> = (0..d).map(|a| (0..d).map(|b| m[a][b] * v[b]).sum()).collect();
        let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        next.iter_mut().for_each(|x| *x /= n);
        v = next;
    }
    v
}

/// `|⟨a, b⟩|` for unit vectors; 1 means the same axis.
pub fn axis_alignment(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs()
}
