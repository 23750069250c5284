use super::{seeded_stream, TAGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

const FEATURE_STREAM: u64 = 11;
const TOPOLOGY_STREAM: u64 = 12;

/// A graph with entrywise feature masking and edge dropping applied.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGraph {
    pub base: TAGraph,
    /// 1.0 where the feature entry is kept, 0.0 where it was zeroed.
    pub feature_mask: Tensor,
    /// `true` where the edge survives.
    pub edge_mask: Vec<bool>,
    pub corrupted_features: Tensor,
    pub kept_edges: Vec<(usize, usize)>,
    /// Indices into `base.edges()` of the kept edges, in original order.
    pub kept_edge_ids: Vec<usize>,
}

impl MaskedGraph {
    /// The graph itself with nothing masked.
    pub fn unmasked(g: &TAGraph) -> Self {
        MaskedGraph {
            base: g.clone(),
            feature_mask: Tensor::filled(g.num_nodes(), g.feature_dim(), 1.0),
            edge_mask: vec![true; g.num_edges()],
            corrupted_features: g.node_features().clone(),
            kept_edges: g.edges().to_vec(),
            kept_edge_ids: (0..g.num_edges()).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.base.num_nodes()
    }

    /// Rows of the base edge-feature matrix for the kept edges.
    pub fn kept_edge_features(&self) -> Tensor {
        let d = self.base.feature_dim();
        if self.kept_edge_ids.is_empty() {
            return Tensor::zeros(0, d);
        }
        self.base.edge_features().select_rows(&self.kept_edge_ids)
    }
}

/// Zeroes each feature entry with probability `p_f` and drops each edge with
/// probability `p_t`. The two masks come from separate streams of `seed`.
pub fn apply_masks(g: &TAGraph, p_f: f64, p_t: f64, seed: u64) -> Result<MaskedGraph> {
    for (name, p) in [("p_f", p_f), ("p_t", p_t)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::arg(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let mut frng = seeded_stream(seed, FEATURE_STREAM);
    let x = g.node_features();
    let mut feature_mask = Tensor::zeros(x.rows(), x.cols());
    for m in feature_mask.data_mut() {
        *m = if frng.gen::<f64>() < p_f { 0.0 } else { 1.0 };
    }
    let corrupted_features = x.hadamard(&feature_mask)?;

    let mut trng = seeded_stream(seed, TOPOLOGY_STREAM);
    let edge_mask: Vec<bool> = (0..g.num_edges()).map(|_| trng.gen::<f64>() >= p_t).collect();
    let kept_edge_ids: Vec<usize> = edge_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect();
    let kept_edges = kept_edge_ids.iter().map(|&i| g.edges()[i]).collect();

    Ok(MaskedGraph {
        base: g.clone(),
        feature_mask,
        edge_mask,
        corrupted_features,
        kept_edges,
        kept_edge_ids,
    })
}
