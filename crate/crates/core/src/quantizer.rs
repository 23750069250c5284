//! Mixture-of-codebooks vector quantization.
//!
//! Every codebook `m` owns a small scorer `s_m(h) = softplus(relu(h W1 + b1) w2 + b2)`.
//! A node activates its Top-k codebooks, looks up its nearest code in each,
//! and mixes the codes with weights `s_m / Σ_{active} s_j`. Code selection is
//! not differentiable; the backward pass copies the output gradient straight
//! onto the input embedding.

use crate::data::seeded_stream;
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, relu, relu_backward, sigmoid, softplus, Tensor};
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Layout of `M` codebooks of `K` codes each plus their scorers. Codes are
/// stored as one `(M·K) x d` tensor; codebook `m` is rows `m·K .. (m+1)·K`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookBank {
    num_codebooks: usize,
    codebook_size: usize,
    dim: usize,
    pub codes: ParamId,
    pub gates: Vec<GateParams>,
}

#[derive(Clone, Debug)]
pub struct GateCache {
    h: Tensor,
    /// Pre-activation of the hidden layer, per codebook.
    hidden_pre: Vec<Tensor>,
    /// Scorer output before softplus, `n x M`.
    logits: Tensor,
}

/// Result of mixture quantization for a set of nodes.
#[derive(Clone, Debug)]
pub struct QuantizeOutcome {
    /// Active codebook ids per node, best score first.
    pub active: Vec<Vec<usize>>,
    /// Mixture weights aligned with `active`.
    pub weights: Vec<Vec<f64>>,
    /// Chosen code index within each active codebook, aligned with `active`.
    pub code_index: Vec<Vec<usize>>,
    /// Mixed quantized embeddings, `n x d`.
    pub zq: Tensor,
    /// The input embeddings, kept for the straight-through surrogate.
    pub h_detached: Tensor,
    /// Gating scores over all codebooks, `n x M`.
    pub scores: Tensor,
    pub gate_cache: Option<GateCache>,
    pub codebook_size: usize,
}

/// Gradients produced by [`ste_backward`].
#[derive(Clone, Debug)]
pub struct SteGrads {
    pub h: Tensor,
    pub scores: Tensor,
    pub codes: Tensor,
}

impl CodebookBank {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        num_codebooks: usize,
        codebook_size: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_codebooks == 0 || codebook_size == 0 {
            return Err(Error::arg("need at least one codebook with at least one code"));
        }
        if dim == 0 {
            return Err(Error::arg("code dimension must be positive"));
        }
        let mut rng = seeded_stream(seed, 41);
        let code_dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
        let rows = num_codebooks * codebook_size;
        let codes = Tensor::from_vec(
            rows,
            dim,
            (0..rows * dim).map(|_| code_dist.sample(&mut rng)).collect(),
        )?;
        let codes = store.add(format!("{prefix}.codes"), codes)?;
        let hidden_dist = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
        let out_dist = Normal::new(0.0, (2.0 / (dim + 1) as f64).sqrt()).unwrap();
        let mut gates = Vec::with_capacity(num_codebooks);
        for m in 0..num_codebooks {
            let p = |s: &str| format!("{prefix}.gate{m}.{s}");
            let w1 = Tensor::from_vec(dim, dim, (0..dim * dim).map(|_| hidden_dist.sample(&mut rng)).collect())?;
            let w2 = Tensor::from_vec(dim, 1, (0..dim).map(|_| out_dist.sample(&mut rng)).collect())?;
            gates.push(GateParams {
                w1: store.add(p("w1"), w1)?,
                b1: store.add(p("b1"), Tensor::zeros(1, dim))?,
                w2: store.add(p("w2"), w2)?,
                b2: store.add(p("b2"), Tensor::zeros(1, 1))?,
            });
        }
        Ok(CodebookBank {
            num_codebooks,
            codebook_size,
            dim,
            codes,
            gates,
        })
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows of codebook `m`.
    pub fn codebook(&self, store: &ParamStore, m: usize) -> Tensor {
        let k = self.codebook_size;
        let idx: Vec<usize> = (m * k..(m + 1) * k).collect();
        store.value(self.codes).select_rows(&idx)
    }

    /// Positive gating scores, `n x M`.
    pub fn gate(&self, store: &ParamStore, h: &Tensor) -> Result<(Tensor, GateCache)> {
        if h.cols() != self.dim {
            return Err(Error::Dimension {
                op: "gate",
                left: h.shape(),
                right: (self.dim, self.num_codebooks),
            });
        }
        let n = h.rows();
        let mut logits = Tensor::zeros(n, self.num_codebooks);
        let mut hidden_pre = Vec::with_capacity(self.num_codebooks);
        for (m, gp) in self.gates.iter().enumerate() {
            let pre = matmul(h, store.value(gp.w1))?.add_row_broadcast(store.value(gp.b1))?;
            let out = matmul(&relu(&pre), store.value(gp.w2))?;
            let b2 = store.value(gp.b2).data()[0];
            for r in 0..n {
                logits.set(r, m, out.get(r, 0) + b2);
            }
            hidden_pre.push(pre);
        }
        let scores = logits.map(softplus);
        Ok((
            scores,
            GateCache {
                h: h.clone(),
                hidden_pre,
                logits,
            },
        ))
    }

    /// Accumulates scorer gradients into `store`; returns the gradient
    /// w.r.t. the scorer input.
    pub fn gate_backward(
        &self,
        store: &mut ParamStore,
        cache: &GateCache,
        grad_scores: &Tensor,
    ) -> Result<Tensor> {
        if grad_scores.shape() != cache.logits.shape() {
            return Err(Error::Dimension {
                op: "gate_backward",
                left: cache.logits.shape(),
                right: grad_scores.shape(),
            });
        }
        let n = cache.h.rows();
        let mut grad_h = Tensor::zeros(n, self.dim);
        for (m, gp) in self.gates.iter().enumerate() {
            let mut g_out = Tensor::zeros(n, 1);
            for r in 0..n {
                g_out.set(r, 0, grad_scores.get(r, m) * sigmoid(cache.logits.get(r, m)));
            }
            if g_out.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let pre = &cache.hidden_pre[m];
            let act = relu(pre);
            store.accumulate(gp.w2, &matmul_tn(&act, &g_out)?)?;
            store.accumulate(gp.b2, &Tensor::filled(1, 1, g_out.sum()))?;
            let g_act = matmul_nt(&g_out, store.value(gp.w2))?;
            let g_pre = relu_backward(pre, &g_act)?;
            store.accumulate(gp.w1, &matmul_tn(&cache.h, &g_pre)?)?;
            store.accumulate(gp.b1, &g_pre.sum_rows())?;
            grad_h.add_assign(&matmul_nt(&g_pre, store.value(gp.w1))?)?;
        }
        Ok(grad_h)
    }

    /// Gates, routes and quantizes every row of `h`.
    pub fn quantize(&self, store: &ParamStore, h: &Tensor, k: usize) -> Result<QuantizeOutcome> {
        if k == 0 || k > self.num_codebooks {
            return Err(Error::arg(format!(
                "top-k must lie in [1, {}], got {k}",
                self.num_codebooks
            )));
        }
        let (scores, cache) = self.gate(store, h)?;
        let mut out = quantize_with_scores(
            h,
            &scores,
            store.value(self.codes),
            self.num_codebooks,
            self.codebook_size,
            k,
        )?;
        out.gate_cache = Some(cache);
        Ok(out)
    }

    /// Plain nearest-code quantization against codebook `m` alone.
    pub fn quantize_single(&self, store: &ParamStore, h: &Tensor, m: usize) -> Result<(Vec<usize>, Tensor)> {
        let book = self.codebook(store, m);
        let mut idx = Vec::with_capacity(h.rows());
        let mut out = Tensor::zeros(h.rows(), self.dim);
        for r in 0..h.rows() {
            let (i, code) = vq_lookup(h.row(r), &book)?;
            idx.push(i);
            out.row_mut(r).copy_from_slice(&code);
        }
        Ok((idx, out))
    }
}

/// Nearest code by Euclidean distance; ties go to the lowest index.
pub fn vq_lookup(z: &[f64], codebook: &Tensor) -> Result<(usize, Vec<f64>)> {
    if codebook.rows() == 0 {
        return Err(Error::state("vq lookup against an empty codebook"));
    }
    if codebook.cols() != z.len() {
        return Err(Error::Dimension {
            op: "vq_lookup",
            left: (1, z.len()),
            right: codebook.shape(),
        });
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, code) in codebook.iter_rows().enumerate() {
        let d: f64 = z.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok((best, codebook.row(best).to_vec()))
}

/// Codebook ids ordered by descending score, ties by lower id, truncated to `k`.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    ids.truncate(k);
    ids
}

/// Routing and mixing given precomputed scores.
pub fn quantize_with_scores(
    h: &Tensor,
    scores: &Tensor,
    codes: &Tensor,
    num_codebooks: usize,
    codebook_size: usize,
    k: usize,
) -> Result<QuantizeOutcome> {
    if k == 0 || k > num_codebooks {
        return Err(Error::arg(format!("top-k must lie in [1, {num_codebooks}], got {k}")));
    }
    if scores.shape() != (h.rows(), num_codebooks) {
        return Err(Error::Dimension {
            op: "quantize",
            left: (h.rows(), num_codebooks),
            right: scores.shape(),
        });
    }
    if codes.shape() != (num_codebooks * codebook_size, h.cols()) {
        return Err(Error::Dimension {
            op: "quantize",
            left: (num_codebooks * codebook_size, h.cols()),
            right: codes.shape(),
        });
    }
    let n = h.rows();
    let d = h.cols();
    let mut active = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut code_index = Vec::with_capacity(n);
    let mut zq = Tensor::zeros(n, d);
    for r in 0..n {
        let s = scores.row(r);
        let act = top_k(s, k);
        let total: f64 = act.iter().map(|&m| s[m]).sum();
        let w: Vec<f64> = act.iter().map(|&m| s[m] / total).collect();
        let mut idx = Vec::with_capacity(k);
        let z = h.row(r);
        for (&m, &wm) in act.iter().zip(&w) {
            let base = m * codebook_size;
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..codebook_size {
                let code = codes.row(base + i);
                let dist: f64 = z.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            idx.push(best);
            let code = codes.row(base + best);
            for (o, c) in zq.row_mut(r).iter_mut().zip(code) {
                *o += wm * c;
            }
        }
        active.push(act);
        weights.push(w);
        code_index.push(idx);
    }
    Ok(QuantizeOutcome {
        active,
        weights,
        code_index,
        zq,
        h_detached: h.clone(),
        scores: scores.clone(),
        gate_cache: None,
        codebook_size,
    })
}

/// Straight-through backward of [`quantize_with_scores`].
///
/// `h` receives `grad_zq` unchanged. Scores of active codebooks receive the
/// derivative of the normalized weights; each selected code receives its
/// weight times `grad_zq`.
pub fn ste_backward(outcome: &QuantizeOutcome, codes: &Tensor, grad_zq: &Tensor) -> Result<SteGrads> {
    if grad_zq.shape() != outcome.zq.shape() {
        return Err(Error::Dimension {
            op: "ste_backward",
            left: outcome.zq.shape(),
            right: grad_zq.shape(),
        });
    }
    let n = grad_zq.rows();
    let mut grad_scores = Tensor::zeros(n, outcome.scores.cols());
    let mut grad_codes = Tensor::zeros(codes.rows(), codes.cols());
    for r in 0..n {
        let g = grad_zq.row(r);
        let act = &outcome.active[r];
        let total: f64 = act.iter().map(|&m| outcome.scores.get(r, m)).sum();
        let z = outcome.zq.row(r);
        for ((&m, &w), &i) in act.iter().zip(&outcome.weights[r]).zip(&outcome.code_index[r]) {
            let row = m * outcome.codebook_size + i;
            let code = codes.row(row);
            // ∂z/∂s_m = (c_m − z) / Σ s
            let gs: f64 = g
                .iter()
                .zip(code)
                .zip(z)
                .map(|((gv, c), zv)| gv * (c - zv))
                .sum::<f64>()
                / total;
            grad_scores.set(r, m, gs);
            for (o, gv) in grad_codes.row_mut(row).iter_mut().zip(g) {
                *o += w * gv;
            }
        }
    }
    Ok(SteGrads {
        h: grad_zq.clone(),
        scores: grad_scores,
        codes: grad_codes,
    })
}

impl QuantizeOutcome {
    pub fn num_nodes(&self) -> usize {
        self.zq.rows()
    }

    /// Re-evaluates the quantizer with routing and code choices frozen to
    /// this outcome, as `(h − h_detached) + Σ w_m(scores) c_m`. Its exact
    /// derivative equals the straight-through gradient, which makes the
    /// surrogate usable for finite-difference checks.
    pub fn frozen_forward(&self, h: &Tensor, scores: &Tensor, codes: &Tensor) -> Result<Tensor> {
        let mut z = h.sub(&self.h_detached)?;
        for r in 0..z.rows() {
            let act = &self.active[r];
            let total: f64 = act.iter().map(|&m| scores.get(r, m)).sum();
            for (&m, &i) in act.iter().zip(&self.code_index[r]) {
                let w = scores.get(r, m) / total;
                let code = codes.row(m * self.codebook_size + i);
                for (o, c) in z.row_mut(r).iter_mut().zip(code) {
                    *o += w * c;
                }
            }
        }
        Ok(z)
    }

    /// Flattened `(codebook, code)` activations, one per active slot.
    pub fn activations(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.active
            .iter()
            .zip(&self.code_index)
            .flat_map(|(a, c)| a.iter().copied().zip(c.iter().copied()))
    }
}
