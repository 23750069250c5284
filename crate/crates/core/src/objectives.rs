//! Pretraining losses: masked feature reconstruction, topology reconstruction
//! with negative sampling, the triple-contrastive alignment term, the
//! domain-aware codebook load constraint, and their weighted sum.
//!
//! Each loss returns its value together with analytic gradients w.r.t. its
//! tensor inputs; parameter gradients of the decoder heads are returned as
//! [`HeadGrads`] for the caller to accumulate with the loss weight.

use crate::data::seeded_stream;
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{
    dot, matmul, matmul_nt, matmul_tn, normalize_rows, normalize_rows_backward, sigmoid, softplus,
    Tensor,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

pub const LOGIT_CLAMP: f64 = 30.0;
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub feat: f64,
    pub topo: f64,
    pub con: f64,
    pub load: f64,
}

impl LossWeights {
    /// `λ1 = 100, λ2 = 0.01, λ3 = 0.001, λ4 = 0.01`.
    pub const REFERENCE: LossWeights = LossWeights {
        feat: 100.0,
        topo: 0.01,
        con: 0.001,
        load: 0.01,
    };
}

/// Unweighted values of the four terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub feat: f64,
    pub topo: f64,
    pub con: f64,
    pub load: f64,
}

/// `λ1·feat + λ2·topo + λ3·con + λ4·load`; fails on the first non-finite part.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("loss_feat", parts.feat),
        ("loss_topo", parts.topo),
        ("loss_con", parts.con),
        ("loss_load", parts.load),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    Ok(w.feat * parts.feat + w.topo * parts.topo + w.con * parts.con + w.load * parts.load)
}

// ---------------------------------------------------------------------------
// decoder heads

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Linear feature head (`d → d_in`) and topology head (`d → d`).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHeads {
    pub feature: LinearHead,
    pub topology: LinearHead,
}

#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

fn init_linear(
    store: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut impl Rng,
) -> Result<LinearHead> {
    let normal = Normal::new(0.0, (2.0 / (din + dout) as f64).sqrt()).unwrap();
    let w = Tensor::from_vec(din, dout, (0..din * dout).map(|_| normal.sample(rng)).collect())?;
    Ok(LinearHead {
        weight: store.add(format!("{name}.weight"), w)?,
        bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dout))?,
    })
}

impl LinearHead {
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        matmul(x, store.value(self.weight))?.add_row_broadcast(store.value(self.bias))
    }

    /// Returns `(grad_x, param grads)` for upstream `grad_out`.
    pub fn backward(&self, store: &ParamStore, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, HeadGrads)> {
        let gx = matmul_nt(grad_out, store.value(self.weight))?;
        Ok((
            gx,
            HeadGrads {
                weight: matmul_tn(x, grad_out)?,
                bias: grad_out.sum_rows(),
            },
        ))
    }

    pub fn accumulate(&self, store: &mut ParamStore, g: &HeadGrads, scale: f64) -> Result<()> {
        store.accumulate(self.weight, &g.weight.scale(scale))?;
        store.accumulate(self.bias, &g.bias.scale(scale))
    }
}

impl DecoderHeads {
    pub fn init(store: &mut ParamStore, prefix: &str, hidden: usize, input_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_stream(seed, 51);
        Ok(DecoderHeads {
            feature: init_linear(store, &format!("{prefix}.feature"), hidden, input_dim, &mut rng)?,
            topology: init_linear(store, &format!("{prefix}.topology"), hidden, hidden, &mut rng)?,
        })
    }

    /// Feature reconstruction through the feature head. Returns
    /// `(value, grad_zq, head grads)`.
    pub fn loss_feat(&self, store: &ParamStore, zq: &Tensor, x: &Tensor) -> Result<(f64, Tensor, HeadGrads)> {
        let zf = self.feature.forward(store, zq)?;
        let (v, g) = feature_reconstruction(&zf, x)?;
        let (gz, hg) = self.feature.backward(store, zq, &g)?;
        Ok((v, gz, hg))
    }

    pub fn loss_topo(
        &self,
        store: &ParamStore,
        zq: &Tensor,
        pos: &[(usize, usize)],
        neg: &[(usize, usize)],
    ) -> Result<(f64, Tensor, HeadGrads)> {
        let zt = self.topology.forward(store, zq)?;
        let (v, g) = topology_reconstruction(&zt, pos, neg)?;
        let (gz, hg) = self.topology.backward(store, zq, &g)?;
        Ok((v, gz, hg))
    }
}

// ---------------------------------------------------------------------------
// reconstruction

/// `(1/n) Σ_i ‖zf_i − x_i‖²` and its gradient w.r.t. `zf`.
pub fn feature_reconstruction(zf: &Tensor, x: &Tensor) -> Result<(f64, Tensor)> {
    if zf.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "loss_feat",
            left: zf.shape(),
            right: x.shape(),
        });
    }
    let n = zf.rows();
    if n == 0 {
        return Err(Error::arg("loss_feat over zero nodes"));
    }
    let diff = zf.sub(x)?;
    let value = diff.sq_norm() / n as f64;
    Ok((value, diff.scale(2.0 / n as f64)))
}

fn clamp_logit(x: f64) -> (f64, bool) {
    if x > LOGIT_CLAMP {
        (LOGIT_CLAMP, true)
    } else if x < -LOGIT_CLAMP {
        (-LOGIT_CLAMP, true)
    } else {
        (x, false)
    }
}

/// Binary cross-entropy on inner-product logits: positives pushed toward 1,
/// negatives toward 0, each set averaged separately.
pub fn topology_reconstruction(
    zt: &Tensor,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
) -> Result<(f64, Tensor)> {
    if pos.is_empty() {
        return Err(Error::arg("loss_topo needs at least one positive edge"));
    }
    let n = zt.rows();
    if let Some(&(u, v)) = pos.iter().chain(neg).find(|&&(u, v)| u >= n || v >= n) {
        return Err(Error::arg(format!("pair ({u}, {v}) outside [0, {n})")));
    }
    let mut grad = Tensor::zeros(n, zt.cols());
    let mut value = 0.0;
    let mut add_pairs = |pairs: &[(usize, usize)], positive: bool, value: &mut f64| {
        let inv = 1.0 / pairs.len() as f64;
        for &(i, j) in pairs {
            let (x, clamped) = clamp_logit(dot(zt.row(i), zt.row(j)));
            // −log σ(x) = softplus(−x); −log(1 − σ(x)) = softplus(x)
            *value += inv * if positive { softplus(-x) } else { softplus(x) };
            if clamped {
                continue;
            }
            let dx = inv * if positive { sigmoid(x) - 1.0 } else { sigmoid(x) };
            let (zi, zj) = (zt.row(i).to_vec(), zt.row(j).to_vec());
            for (g, v) in grad.row_mut(i).iter_mut().zip(&zj) {
                *g += dx * v;
            }
            for (g, v) in grad.row_mut(j).iter_mut().zip(&zi) {
                *g += dx * v;
            }
        }
    };
    add_pairs(pos, true, &mut value);
    if !neg.is_empty() {
        add_pairs(neg, false, &mut value);
    }
    Ok((value, grad))
}

/// Uniformly samples `count` distinct-endpoint non-edges by rejection.
/// Returns fewer only when the graph has no non-edges at all.
pub fn sample_negative_edges(
    num_nodes: usize,
    edges: &[(usize, usize)],
    count: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let total_pairs = num_nodes * num_nodes.saturating_sub(1) / 2;
    let existing: HashSet<(usize, usize)> = edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
    if num_nodes < 2 || existing.len() >= total_pairs {
        return Vec::new();
    }
    let mut rng = seeded_stream(seed, 61);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.gen_range(0..num_nodes);
        let j = rng.gen_range(0..num_nodes);
        if i == j || existing.contains(&(i.min(j), i.max(j))) {
            continue;
        }
        out.push((i, j));
    }
    out
}

// ---------------------------------------------------------------------------
// contrastive

/// Whether the `h_i·h_i` and `z_i·z_i` self-similarities enter the denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTerms {
    #[default]
    Include,
    Exclude,
}

/// Triple-contrastive loss over anchors `i`:
///
/// ```text
/// −log exp(S(h_i,z_i)/τ) / Σ_j [exp(S(h_i,z_j)/τ) + exp(S(h_i,h_j)/τ) + exp(S(z_i,z_j)/τ)]
/// ```
///
/// averaged over anchors, with `S` the cosine similarity. Returns the value
/// and gradients w.r.t. `h` and `z`.
pub fn triple_contrastive(h: &Tensor, z: &Tensor, tau: f64, self_terms: SelfTerms) -> Result<(f64, Tensor, Tensor)> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    if h.shape() != z.shape() {
        return Err(Error::Dimension {
            op: "loss_con",
            left: h.shape(),
            right: z.shape(),
        });
    }
    let n = h.rows();
    if n == 0 {
        return Err(Error::arg("loss_con over zero nodes"));
    }
    let (hn, h_norms) = normalize_rows(h);
    let (zn, z_norms) = normalize_rows(z);
    let clamp = |t: Tensor| t.map(|v| v.clamp(-1.0, 1.0));
    let hz = clamp(matmul_nt(&hn, &zn)?);
    let hh = clamp(matmul_nt(&hn, &hn)?);
    let zz = clamp(matmul_nt(&zn, &zn)?);

    let mut d_hz = Tensor::zeros(n, n);
    let mut d_hh = Tensor::zeros(n, n);
    let mut d_zz = Tensor::zeros(n, n);
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut logits = Vec::with_capacity(3 * n);
    for i in 0..n {
        logits.clear();
        for j in 0..n {
            logits.push(hz.get(i, j) / tau);
        }
        for j in 0..n {
            let skip = self_terms == SelfTerms::Exclude && i == j;
            logits.push(if skip { f64::NEG_INFINITY } else { hh.get(i, j) / tau });
        }
        for j in 0..n {
            let skip = self_terms == SelfTerms::Exclude && i == j;
            logits.push(if skip { f64::NEG_INFINITY } else { zz.get(i, j) / tau });
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.iter_mut().for_each(|l| *l = (*l - max).exp());
        let sum: f64 = logits.iter().sum();
        let lse = max + sum.ln();
        value += inv_n * (lse - hz.get(i, i) / tau);
        let scale = inv_n / tau;
        // logits now hold shifted exponentials; p = e / sum
        let c = scale / sum;
        for j in 0..n {
            d_hz.data_mut()[i * n + j] += c * logits[j];
            d_hh.data_mut()[i * n + j] += c * logits[n + j];
            d_zz.data_mut()[i * n + j] += c * logits[2 * n + j];
        }
        d_hz.data_mut()[i * n + i] -= scale;
    }

    // hz = hn znᵀ, hh = hn hnᵀ, zz = zn znᵀ
    let mut g_hn = matmul(&d_hz, &zn)?;
    let mut g_zn = matmul_tn(&d_hz, &hn)?;
    let sym_hh = d_hh.add(&d_hh.transpose())?;
    let sym_zz = d_zz.add(&d_zz.transpose())?;
    g_hn.add_assign(&matmul(&sym_hh, &hn)?)?;
    g_zn.add_assign(&matmul(&sym_zz, &zn)?)?;
    let g_h = normalize_rows_backward(h, &hn, &h_norms, &g_hn);
    let g_z = normalize_rows_backward(z, &zn, &z_norms, &g_zn);
    Ok((value, g_h, g_z))
}

/// `(1/n) Σ ‖h_i − sg(zq_i)‖²`; gradient flows to `h` only.
pub fn commitment(h: &Tensor, zq: &Tensor) -> Result<(f64, Tensor)> {
    feature_reconstruction(h, zq)
}

// ---------------------------------------------------------------------------
// codebook load

/// Cross-entropy between each node's normalized score distribution over all
/// `M` codebooks and the one-hot of its domain. Returns the gradient w.r.t.
/// the raw (positive) scores.
pub fn load_balance(scores: &Tensor, domains: &[usize]) -> Result<(f64, Tensor)> {
    let (n, m) = scores.shape();
    if domains.len() != n {
        return Err(Error::arg(format!("{} domain labels for {n} nodes", domains.len())));
    }
    if n == 0 {
        return Err(Error::arg("loss_load over zero nodes"));
    }
    if let Some(&bad) = domains.iter().find(|&&d| d >= m) {
        return Err(Error::arg(format!("domain label {bad} outside [0, {m})")));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(n, m);
    for (r, &c) in domains.iter().enumerate() {
        let s = scores.row(r);
        let total: f64 = s.iter().sum();
        let y = s[c] / total;
        value -= inv_n * y.max(LOG_EPS).ln();
        if y > LOG_EPS {
            // −∂ log(s_c / Σ s)/∂s_j = 1/Σ s − δ_jc / s_c
            for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
                *g = inv_n * (1.0 / total - if j == c { 1.0 / s[c] } else { 0.0 });
            }
        }
    }
    Ok((value, grad))
}

/// Importance-balancing loss from the mixture-of-experts literature: the
/// squared coefficient of variation of per-codebook importance
/// `Σ_i s_{i,m} / Σ_j s_{i,j}`. Domain-agnostic.
pub fn importance_balance(scores: &Tensor) -> Result<(f64, Tensor)> {
    let (n, m) = scores.shape();
    if n == 0 || m == 0 {
        return Err(Error::arg("importance loss over an empty score matrix"));
    }
    let mut probs = Tensor::zeros(n, m);
    let mut totals = Vec::with_capacity(n);
    let mut imp = vec![0.0; m];
    for r in 0..n {
        let total: f64 = scores.row(r).iter().sum();
        totals.push(total);
        for j in 0..m {
            let p = scores.get(r, j) / total;
            probs.set(r, j, p);
            imp[j] += p;
        }
    }
    let mf = m as f64;
    let mean = imp.iter().sum::<f64>() / mf;
    let var = imp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
    let value = var / (mean * mean);
    let g_imp: Vec<f64> = imp
        .iter()
        .map(|v| 2.0 * (v - mean) / (mf * mean * mean) - 2.0 * var / (mf * mean.powi(3)))
        .collect();
    let mut grad = Tensor::zeros(n, m);
    for r in 0..n {
        let avg: f64 = (0..m).map(|k| g_imp[k] * probs.get(r, k)).sum();
        for j in 0..m {
            grad.set(r, j, (g_imp[j] - avg) / totals[r]);
        }
    }
    Ok((value, grad))
}
