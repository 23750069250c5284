//! Edge-wise semantic fusion encoder.
//!
//! Each layer updates node and edge states simultaneously from the previous
//! layer's states:
//!
//! ```text
//! h_u' = dropout(bn(relu(h_u W1 + mean_{v ∈ N(u)} (h_v + e_uv) W2)))
//! e_uv' = relu(e_uv W3 + ½ (h_u + h_v) W4)
//! ```
//!
//! Only kept (unmasked) edges take part. With `edge_fusion` disabled the
//! `e_uv` term is dropped from the neighbor mean, giving plain mean
//! aggregation.

use crate::data::{seeded_stream, MaskedGraph};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, relu, relu_backward, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub edge_fusion: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub bn_scale: ParamId,
    pub bn_shift: ParamId,
    pub bn_running_mean: ParamId,
    pub bn_running_var: ParamId,
}

/// Layer layout of the encoder; the tensors themselves live in a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct FusionEncoder {
    cfg: EncoderConfig,
    layers: Vec<LayerParams>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    h_in: Tensor,
    e_in: Tensor,
    agg: Tensor,
    pre_h: Tensor,
    /// Normalized activations and per-column `1/sqrt(var + eps)`.
    bn: Option<(Tensor, Vec<f64>)>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    dropout_mask: Option<Tensor>,
    pre_e: Tensor,
}

#[derive(Clone, Debug)]
struct EncodeCache {
    layers: Vec<LayerCache>,
    kept_edges: Vec<(usize, usize)>,
    degree: Vec<usize>,
    training: bool,
}

#[derive(Clone, Debug)]
pub struct EncodeResult {
    /// Final node states, `n x d`.
    pub node_hidden: Tensor,
    /// Final states of the kept edges, `m_kept x d`.
    pub edge_hidden: Tensor,
    cache: Option<EncodeCache>,
}

impl EncodeResult {
    /// Drops the activation cache (backward then fails with a state error).
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Gradients w.r.t. the encoder inputs.
#[derive(Clone, Debug)]
pub struct EncoderInputGrads {
    pub node_features: Tensor,
    /// One row per kept edge.
    pub edge_features: Tensor,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

impl FusionEncoder {
    /// Registers all layer tensors under `prefix` in `store`.
    pub fn init(cfg: EncoderConfig, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<Self> {
        if cfg.num_layers == 0 || cfg.hidden_dim == 0 || cfg.input_dim == 0 {
            return Err(Error::arg("encoder dims and layer count must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::arg(format!("dropout must lie in [0, 1), got {}", cfg.dropout)));
        }
        let mut rng = seeded_stream(seed, 31);
        let d = cfg.hidden_dim;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let din = if l == 0 { cfg.input_dim } else { d };
            let p = |s: &str| format!("{prefix}.layer{l}.{s}");
            layers.push(LayerParams {
                w1: store.add(p("w1"), glorot(din, d, &mut rng))?,
                w2: store.add(p("w2"), glorot(din, d, &mut rng))?,
                w3: store.add(p("w3"), glorot(din, d, &mut rng))?,
                w4: store.add(p("w4"), glorot(din, d, &mut rng))?,
                bn_scale: store.add(p("bn_scale"), Tensor::filled(1, d, 1.0))?,
                bn_shift: store.add(p("bn_shift"), Tensor::zeros(1, d))?,
                bn_running_mean: store.add_buffer(p("bn_running_mean"), Tensor::zeros(1, d))?,
                bn_running_var: store.add_buffer(p("bn_running_var"), Tensor::filled(1, d, 1.0))?,
            });
        }
        Ok(FusionEncoder { cfg, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn set_edge_fusion(&mut self, on: bool) {
        self.cfg.edge_fusion = on;
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.cfg.dropout = p;
    }

    pub fn set_batch_norm(&mut self, on: bool) {
        self.cfg.batch_norm = on;
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        g: &MaskedGraph,
        training: bool,
        seed: u64,
    ) -> Result<EncodeResult> {
        let n = g.num_nodes();
        if g.corrupted_features.cols() != self.cfg.input_dim {
            return Err(Error::shape(
                "encoder layer 0",
                format!(
                    "feature dim {} but layer expects {}",
                    g.corrupted_features.cols(),
                    self.cfg.input_dim
                ),
            ));
        }
        let kept = g.kept_edges.clone();
        let mut degree = vec![0usize; n];
        for &(u, v) in &kept {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut h = g.corrupted_features.clone();
        let mut e = g.kept_edge_features();
        let mut caches = Vec::with_capacity(self.layers.len());

        for (l, lp) in self.layers.iter().enumerate() {
            let w1 = store.value(lp.w1);
            let w2 = store.value(lp.w2);
            let w3 = store.value(lp.w3);
            let w4 = store.value(lp.w4);
            if w1.rows() != h.cols() {
                return Err(Error::shape(
                    format!("encoder layer {l}"),
                    format!("input dim {} vs weight rows {}", h.cols(), w1.rows()),
                ));
            }

            let mut agg = Tensor::zeros(n, h.cols());
            for (k, &(u, v)) in kept.iter().enumerate() {
                for (dst, src) in [(u, v), (v, u)] {
                    let hs = h.row(src).to_vec();
                    let row = agg.row_mut(dst);
                    for (j, a) in row.iter_mut().enumerate() {
                        *a += hs[j];
                    }
                    if self.cfg.edge_fusion {
                        let er = e.row(k);
                        for (a, x) in agg.row_mut(dst).iter_mut().zip(er) {
                            *a += x;
                        }
                    }
                }
            }
            for (u, &dg) in degree.iter().enumerate() {
                if dg > 0 {
                    let inv = 1.0 / dg as f64;
                    agg.row_mut(u).iter_mut().for_each(|a| *a *= inv);
                }
            }

            let pre_h = matmul(&h, w1)?.add(&matmul(&agg, w2)?)?;
            let act = relu(&pre_h);
            let d = act.cols();

            let mut batch_mean = vec![0.0; d];
            let mut batch_var = vec![0.0; d];
            let (mut out, bn) = if self.cfg.batch_norm {
                let gamma = store.value(lp.bn_scale);
                let beta = store.value(lp.bn_shift);
                let (mean, var) = if training {
                    for r in act.iter_rows() {
                        for (m, x) in batch_mean.iter_mut().zip(r) {
                            *m += x;
                        }
                    }
                    batch_mean.iter_mut().for_each(|m| *m /= n as f64);
                    for r in act.iter_rows() {
                        for ((vv, x), m) in batch_var.iter_mut().zip(r).zip(&batch_mean) {
                            *vv += (x - m) * (x - m);
                        }
                    }
                    batch_var.iter_mut().for_each(|vv| *vv /= n as f64);
                    (batch_mean.clone(), batch_var.clone())
                } else {
                    (
                        store.value(lp.bn_running_mean).data().to_vec(),
                        store.value(lp.bn_running_var).data().to_vec(),
                    )
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = act.clone();
                let mut y = act.clone();
                for r in 0..n {
                    for j in 0..d {
                        let xh = (act.get(r, j) - mean[j]) * inv_std[j];
                        xhat.set(r, j, xh);
                        y.set(r, j, gamma.data()[j] * xh + beta.data()[j]);
                    }
                }
                (y, Some((xhat, inv_std)))
            } else {
                (act, None)
            };

            let dropout_mask = if training && self.cfg.dropout > 0.0 {
                let keep = 1.0 - self.cfg.dropout;
                let mut rng = seeded_stream(seed, 100 + l as u64);
                let mut mask = Tensor::zeros(n, d);
                for m in mask.data_mut() {
                    *m = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
                out = out.hadamard(&mask)?;
                Some(mask)
            } else {
                None
            };

            let mut pair_sum = Tensor::zeros(kept.len(), h.cols());
            for (k, &(u, v)) in kept.iter().enumerate() {
                let (hu, hv) = (h.row(u).to_vec(), h.row(v));
                for ((s, a), b) in pair_sum.row_mut(k).iter_mut().zip(&hu).zip(hv) {
                    *s = 0.5 * (a + b);
                }
            }
            let pre_e = matmul(&e, w3)?.add(&matmul(&pair_sum, w4)?)?;
            let e_next = relu(&pre_e);

            caches.push(LayerCache {
                h_in: h,
                e_in: e,
                agg,
                pre_h,
                bn,
                batch_mean,
                batch_var,
                dropout_mask,
                pre_e,
            });
            h = out;
            e = e_next;
        }

        Ok(EncodeResult {
            node_hidden: h,
            edge_hidden: e,
            cache: Some(EncodeCache {
                layers: caches,
                kept_edges: kept,
                degree,
                training,
            }),
        })
    }

    /// Reverse pass. Accumulates parameter gradients into `store` and returns
    /// the gradients w.r.t. the (corrupted) node features and kept-edge
    /// features.
    pub fn encode_backward(
        &self,
        store: &mut ParamStore,
        result: &EncodeResult,
        grad_node: &Tensor,
        grad_edge: Option<&Tensor>,
    ) -> Result<EncoderInputGrads> {
        let cache = result
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("encode result carries no activation cache"))?;
        if grad_node.shape() != result.node_hidden.shape() {
            return Err(Error::Dimension {
                op: "encode_backward",
                left: result.node_hidden.shape(),
                right: grad_node.shape(),
            });
        }
        let mut gh = grad_node.clone();
        let mut ge = match grad_edge {
            Some(g) => {
                if g.shape() != result.edge_hidden.shape() {
                    return Err(Error::Dimension {
                        op: "encode_backward",
                        left: result.edge_hidden.shape(),
                        right: g.shape(),
                    });
                }
                g.clone()
            }
            None => Tensor::zeros(result.edge_hidden.rows(), result.edge_hidden.cols()),
        };
        let kept = &cache.kept_edges;
        let n = gh.rows();

        for (lp, lc) in self.layers.iter().zip(&cache.layers).rev() {
            // node path
            let mut g = gh;
            if let Some(mask) = &lc.dropout_mask {
                g = g.hadamard(mask)?;
            }
            if let Some((xhat, inv_std)) = &lc.bn {
                let gamma = store.value(lp.bn_scale).data().to_vec();
                let d = g.cols();
                let mut g_gamma = Tensor::zeros(1, d);
                let g_beta = g.sum_rows();
                for r in 0..n {
                    for j in 0..d {
                        g_gamma.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                    }
                }
                let mut g_act = Tensor::zeros(n, d);
                if cache.training {
                    let nf = n as f64;
                    for j in 0..d {
                        let mut sum_gx = 0.0;
                        let mut sum_gx_xhat = 0.0;
                        for r in 0..n {
                            let gx = g.get(r, j) * gamma[j];
                            sum_gx += gx;
                            sum_gx_xhat += gx * xhat.get(r, j);
                        }
                        for r in 0..n {
                            let gx = g.get(r, j) * gamma[j];
                            let v = inv_std[j] / nf * (nf * gx - sum_gx - xhat.get(r, j) * sum_gx_xhat);
                            g_act.set(r, j, v);
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..d {
                            g_act.set(r, j, g.get(r, j) * gamma[j] * inv_std[j]);
                        }
                    }
                }
                store.accumulate(lp.bn_scale, &g_gamma)?;
                store.accumulate(lp.bn_shift, &g_beta)?;
                g = g_act;
            }
            let g_pre = relu_backward(&lc.pre_h, &g)?;
            store.accumulate(lp.w1, &matmul_tn(&lc.h_in, &g_pre)?)?;
            store.accumulate(lp.w2, &matmul_tn(&lc.agg, &g_pre)?)?;
            let mut g_h_in = matmul_nt(&g_pre, store.value(lp.w1))?;
            let g_agg = matmul_nt(&g_pre, store.value(lp.w2))?;
            let mut g_e_in = Tensor::zeros(lc.e_in.rows(), lc.e_in.cols());
            for (k, &(u, v)) in kept.iter().enumerate() {
                for (dst, src) in [(u, v), (v, u)] {
                    let inv = 1.0 / cache.degree[dst] as f64;
                    let ga: Vec<f64> = g_agg.row(dst).iter().map(|x| x * inv).collect();
                    for (o, x) in g_h_in.row_mut(src).iter_mut().zip(&ga) {
                        *o += x;
                    }
                    if self.cfg.edge_fusion {
                        for (o, x) in g_e_in.row_mut(k).iter_mut().zip(&ga) {
                            *o += x;
                        }
                    }
                }
            }

            // edge path
            let g_pre_e = relu_backward(&lc.pre_e, &ge)?;
            store.accumulate(lp.w3, &matmul_tn(&lc.e_in, &g_pre_e)?)?;
            let mut pair_sum = Tensor::zeros(kept.len(), lc.h_in.cols());
            for (k, &(u, v)) in kept.iter().enumerate() {
                let hu = lc.h_in.row(u).to_vec();
                for ((s, a), b) in pair_sum.row_mut(k).iter_mut().zip(&hu).zip(lc.h_in.row(v)) {
                    *s = 0.5 * (a + b);
                }
            }
            store.accumulate(lp.w4, &matmul_tn(&pair_sum, &g_pre_e)?)?;
            g_e_in.add_assign(&matmul_nt(&g_pre_e, store.value(lp.w3))?)?;
            let g_pair = matmul_nt(&g_pre_e, store.value(lp.w4))?;
            for (k, &(u, v)) in kept.iter().enumerate() {
                let gp: Vec<f64> = g_pair.row(k).iter().map(|x| 0.5 * x).collect();
                for node in [u, v] {
                    for (o, x) in g_h_in.row_mut(node).iter_mut().zip(&gp) {
                        *o += x;
                    }
                }
            }

            gh = g_h_in;
            ge = g_e_in;
        }

        Ok(EncoderInputGrads {
            node_features: gh,
            edge_features: ge,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics used in eval mode.
    pub fn update_running_stats(&self, store: &mut ParamStore, result: &EncodeResult) -> Result<()> {
        let cache = result
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("encode result carries no activation cache"))?;
        if !cache.training || !self.cfg.batch_norm {
            return Ok(());
        }
        for (lp, lc) in self.layers.iter().zip(&cache.layers) {
            let rm = store.value_mut(lp.bn_running_mean);
            for (r, b) in rm.data_mut().iter_mut().zip(&lc.batch_mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let rv = store.value_mut(lp.bn_running_var);
            for (r, b) in rv.data_mut().iter_mut().zip(&lc.batch_var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_masks, generate_synthetic_domain, TAGraph};
    use crate::tensor::Tensor;

    fn two_node_graph(h_u: [f64; 2], h_v: [f64; 2]) -> MaskedGraph {
        let x = Tensor::from_rows(&[h_u, h_v]).unwrap();
        let g = TAGraph::new(2, vec![(0, 1)], x, Tensor::zeros(1, 2), None, 0, None).unwrap();
        MaskedGraph::unmasked(&g)
    }

    fn plain_cfg(din: usize, d: usize, layers: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: din,
            hidden_dim: d,
            num_layers: layers,
            dropout: 0.0,
            batch_norm: false,
            edge_fusion: true,
        }
    }

    fn identity_encoder() -> (FusionEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let enc = FusionEncoder::init(plain_cfg(2, 2, 1), &mut store, "enc", 0).unwrap();
        let lp = enc.layers()[0];
        for id in [lp.w1, lp.w2, lp.w3, lp.w4] {
            *store.value_mut(id) = Tensor::identity(2);
        }
        (enc, store)
    }

    #[test]
    fn node_update_hand_case() {
        let (enc, store) = identity_encoder();
        let g = two_node_graph([1.0, 0.0], [0.0, 1.0]);
        let r = enc.encode(&store, &g, false, 0).unwrap();
        assert_eq!(r.node_hidden.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn edge_update_hand_case() {
        let (enc, store) = identity_encoder();
        let g = two_node_graph([1.0, 0.0], [0.0, 1.0]);
        let r = enc.encode(&store, &g, false, 0).unwrap();
        assert_eq!(r.edge_hidden.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn isolated_node_gets_zero_aggregate() {
        let (enc, store) = identity_encoder();
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.5]]).unwrap();
        let g = TAGraph::new(2, vec![], x, Tensor::zeros(0, 2), None, 0, None).unwrap();
        let r = enc.encode(&store, &MaskedGraph::unmasked(&g), false, 0).unwrap();
        assert_eq!(r.node_hidden.row(0), &[1.0, 0.0]);
        assert!(r.node_hidden.is_finite());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut store = ParamStore::new();
        let mut cfg = plain_cfg(4, 3, 2);
        cfg.batch_norm = true;
        let enc = FusionEncoder::init(cfg, &mut store, "enc", 1).unwrap();
        let g = generate_synthetic_domain(0, 12, 3.0, 4, 2, 2).unwrap();
        let m = MaskedGraph::unmasked(&g);
        let r = enc.encode(&store, &m, true, 0).unwrap();
        let zero = Tensor::zeros(r.node_hidden.rows(), r.node_hidden.cols());
        enc.encode_backward(&mut store, &r, &zero, None).unwrap();
        assert_eq!(store.grad_norm(), 0.0);
    }

    #[test]
    fn disconnected_node_gives_no_w2_grad() {
        let mut store = ParamStore::new();
        let enc = FusionEncoder::init(plain_cfg(2, 3, 2), &mut store, "enc", 1).unwrap();
        let x = Tensor::from_rows(&[[1.0, 0.3], [0.2, 1.0], [0.7, -0.4]]).unwrap();
        let g = TAGraph::new(3, vec![(1, 2)], x, Tensor::filled(1, 2, 0.4), None, 0, None).unwrap();
        let m = MaskedGraph::unmasked(&g);
        let r = enc.encode(&store, &m, false, 0).unwrap();
        let mut up = Tensor::zeros(3, 3);
        up.row_mut(0).copy_from_slice(&[1.0, -1.0, 0.5]);
        enc.encode_backward(&mut store, &r, &up, None).unwrap();
        for lp in enc.layers() {
            assert_eq!(store.grad(lp.w2).sq_norm(), 0.0);
        }
    }

    #[test]
    fn missing_cache_is_state_error() {
        let (enc, mut store) = identity_encoder();
        let g = two_node_graph([1.0, 0.0], [0.0, 1.0]);
        let r = enc.encode(&store, &g, false, 0).unwrap().without_cache();
        let up = Tensor::zeros(2, 2);
        assert!(matches!(
            enc.encode_backward(&mut store, &r, &up, None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn wrong_feature_dim_names_layer() {
        let (enc, store) = identity_encoder();
        let g = generate_synthetic_domain(0, 5, 1.0, 3, 2, 0).unwrap();
        let err = enc.encode(&store, &MaskedGraph::unmasked(&g), false, 0).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let mut store = ParamStore::new();
        let mut cfg = plain_cfg(4, 6, 2);
        cfg.dropout = 0.3;
        let enc = FusionEncoder::init(cfg, &mut store, "enc", 3).unwrap();
        let g = generate_synthetic_domain(0, 20, 3.0, 4, 2, 2).unwrap();
        let m = apply_masks(&g, 0.1, 0.1, 4).unwrap();
        let a = enc.encode(&store, &m, true, 77).unwrap();
        let b = enc.encode(&store, &m, true, 77).unwrap();
        let c = enc.encode(&store, &m, true, 78).unwrap();
        assert_eq!(a.node_hidden, b.node_hidden);
        assert_ne!(a.node_hidden, c.node_hidden);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut store = ParamStore::new();
        let mut cfg = plain_cfg(4, 3, 1);
        cfg.batch_norm = true;
        let enc = FusionEncoder::init(cfg, &mut store, "enc", 3).unwrap();
        let g = generate_synthetic_domain(0, 20, 3.0, 4, 2, 2).unwrap();
        let r = enc.encode(&store, &MaskedGraph::unmasked(&g), true, 0).unwrap();
        let before = store.value(enc.layers()[0].bn_running_mean).clone();
        enc.update_running_stats(&mut store, &r).unwrap();
        assert_ne!(&before, store.value(enc.layers()[0].bn_running_mean));
    }
}
