//! Collapse and degradation diagnostics: per-domain KL heatmap, codebook
//! utilization entropy, angular dispersion, 1-D PCA landscapes and
//! effective rank.

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, dot, norm, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Variance floor for the per-domain diagonal Gaussians.
pub const VAR_FLOOR: f64 = 1e-6;
pub const LANDSCAPE_BUCKETS: usize = 64;
pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 10_000;

/// `KL(N(μa, diag va) ‖ N(μb, diag vb))`.
pub fn diag_gaussian_kl(mu_a: &[f64], var_a: &[f64], mu_b: &[f64], var_b: &[f64]) -> f64 {
    mu_a.iter()
        .zip(var_a)
        .zip(mu_b.iter().zip(var_b))
        .map(|((ma, va), (mb, vb))| 0.5 * ((vb / va).ln() + (va + (ma - mb) * (ma - mb)) / vb - 1.0))
        .sum()
}

/// `M x M` matrix of KL divergences between per-domain diagonal Gaussians.
/// Rows and columns of domains with fewer than two samples are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlMatrix {
    pub values: Vec<Vec<Option<f64>>>,
}

impl KlMatrix {
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.values[a][b]
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }
}

pub fn domain_kl_heatmap(h: &Tensor, domains: &[usize], num_domains: usize) -> Result<KlMatrix> {
    if domains.len() != h.rows() {
        return Err(Error::arg(format!("{} domain labels for {} rows", domains.len(), h.rows())));
    }
    if let Some(&bad) = domains.iter().find(|&&d| d >= num_domains) {
        return Err(Error::arg(format!("domain {bad} outside [0, {num_domains})")));
    }
    let d = h.cols();
    let mut fits: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(num_domains);
    for dom in 0..num_domains {
        let rows: Vec<&[f64]> = (0..h.rows()).filter(|&r| domains[r] == dom).map(|r| h.row(r)).collect();
        if rows.len() < 2 {
            fits.push(None);
            continue;
        }
        let cnt = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / cnt).max(VAR_FLOOR));
        fits.push(Some((mean, var)));
    }
    let values = (0..num_domains)
        .map(|a| {
            (0..num_domains)
                .map(|b| match (&fits[a], &fits[b]) {
                    (Some(_), Some(_)) if a == b => Some(0.0),
                    (Some((ma, va)), Some((mb, vb))) => Some(diag_gaussian_kl(ma, va, mb, vb)),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(KlMatrix { values })
}

/// Shannon entropy (nats) of an empirical distribution given by counts.
pub fn entropy_of_counts<I: IntoIterator<Item = usize>>(counts: I) -> f64 {
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Entropy of the joint `(codebook, code)` usage over all activations.
pub fn utilization_entropy<I: IntoIterator<Item = (usize, usize)>>(activations: I) -> f64 {
    let mut hist: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for a in activations {
        *hist.entry(a).or_insert(0) += 1;
    }
    entropy_of_counts(hist.into_values())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularStats {
    /// Mean over unordered pairs of `arccos(cos)`, in radians.
    pub mean: f64,
    /// Zero rows left out of the average.
    pub excluded_rows: usize,
}

pub fn angular_uniformity(x: &Tensor) -> Result<AngularStats> {
    let keep: Vec<usize> = (0..x.rows()).filter(|&r| norm(x.row(r)) > 0.0).collect();
    let excluded_rows = x.rows() - keep.len();
    if excluded_rows > 0 {
        log::warn!("angular_uniformity: excluded {excluded_rows} zero rows");
    }
    if keep.len() < 2 {
        return Err(Error::arg("angular uniformity needs at least two nonzero rows"));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in keep.iter().enumerate() {
        for &j in &keep[a + 1..] {
            sum += cosine_sim(x.row(i), x.row(j))?.acos();
            pairs += 1;
        }
    }
    Ok(AngularStats {
        mean: sum / pairs as f64,
        excluded_rows,
    })
}

fn column_means(x: &Tensor) -> Vec<f64> {
    let mut m = x.sum_rows().into_data();
    m.iter_mut().for_each(|v| *v /= x.rows() as f64);
    m
}

/// Population covariance of the rows of `x`.
pub fn covariance(x: &Tensor) -> Tensor {
    let mean = column_means(x);
    let d = x.cols();
    let mut c = Tensor::zeros(d, d);
    for r in x.iter_rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                c.data_mut()[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    c.scale_in_place(1.0 / x.rows() as f64);
    c
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration, with
/// the sign chosen so that the largest-magnitude entry is positive. Returns
/// `(vector, eigenvalue)`; the vector is zero when the matrix is.
pub fn power_iteration(m: &Tensor, tol: f64, max_iters: usize) -> (Vec<f64>, f64) {
    let d = m.rows();
    // deterministic start that is unlikely to be orthogonal to the top direction
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let mut w = vec![0.0; d];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(m.row(i), &v);
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return (vec![0.0; d], 0.0);
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = nw;
        if delta < tol {
            break;
        }
    }
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn build(values: &[f64], lo: f64, hi: f64, buckets: usize) -> Self {
        let mut counts = vec![0; buckets];
        let width = (hi - lo) / buckets as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(buckets - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Histogram { lo, hi, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub direction: Vec<f64>,
    /// Variance of the reference along `direction`.
    pub variance: f64,
    pub projected: Vec<f64>,
    pub reference_projected: Vec<f64>,
    pub histogram: Histogram,
    pub reference_histogram: Histogram,
    /// Set when the reference has no variance; all mass lands in one bucket.
    pub degenerate: bool,
}

/// Projects `x` (and the reference) onto the reference's first principal
/// direction and histograms both over the pooled range.
pub fn landscape_1d(x: &Tensor, reference: Option<&Tensor>) -> Result<Landscape> {
    let reference = reference.unwrap_or(x);
    if x.rows() < 2 || reference.rows() < 2 {
        return Err(Error::arg("landscape needs at least two rows"));
    }
    if x.cols() != reference.cols() {
        return Err(Error::Dimension {
            op: "landscape_1d",
            left: x.shape(),
            right: reference.shape(),
        });
    }
    let cov = covariance(reference);
    let (direction, variance) = power_iteration(&cov, PCA_TOL, PCA_MAX_ITERS);
    let mean = column_means(reference);
    let project = |t: &Tensor| -> Vec<f64> {
        t.iter_rows()
            .map(|r| r.iter().zip(&mean).zip(&direction).map(|((a, m), d)| (a - m) * d).sum())
            .collect()
    };
    let projected = project(x);
    let reference_projected = project(reference);
    let degenerate = variance <= 1e-15;
    let (lo, hi) = projected
        .iter()
        .chain(&reference_projected)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if degenerate { (lo, lo) } else { (lo, hi) };
    Ok(Landscape {
        histogram: Histogram::build(&projected, lo, hi, LANDSCAPE_BUCKETS),
        reference_histogram: Histogram::build(&reference_projected, lo, hi, LANDSCAPE_BUCKETS),
        direction,
        variance,
        projected,
        reference_projected,
        degenerate,
    })
}

/// `exp(H(p))` with `p` the normalized singular values of the centered
/// matrix.
pub fn effective_rank(x: &Tensor) -> f64 {
    if x.rows() < 2 {
        return 0.0;
    }
    let cov = covariance(x);
    let d = cov.rows();
    let m = nalgebra::DMatrix::from_row_slice(d, d, cov.data());
    let eig = nalgebra::SymmetricEigen::new(m);
    let sv: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let total: f64 = sv.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    h.exp()
}
