use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashSet;

/// Undirected attributed graph from a single domain.
///
/// Each undirected edge is stored once as an ordered pair; message passing
/// treats it symmetrically.
#[derive(Clone, Debug, PartialEq)]
pub struct TAGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Tensor,
    edge_features: Tensor,
    node_labels: Option<Vec<usize>>,
    domain_id: usize,
    graph_label: Option<i64>,
}

impl TAGraph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_features: Tensor,
        edge_features: Tensor,
        node_labels: Option<Vec<usize>>,
        domain_id: usize,
        graph_label: Option<i64>,
    ) -> Result<Self> {
        let g = TAGraph {
            num_nodes,
            edges,
            node_features,
            edge_features,
            node_labels,
            domain_id,
            graph_label,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.node_features.rows() != n {
            return Err(Error::Validation(format!(
                "node_features has {} rows for {n} nodes",
                self.node_features.rows()
            )));
        }
        if self.edge_features.rows() != self.edges.len() {
            return Err(Error::Validation(format!(
                "edge_features has {} rows for {} edges",
                self.edge_features.rows(),
                self.edges.len()
            )));
        }
        if !self.edges.is_empty() && self.edge_features.cols() != self.node_features.cols() {
            return Err(Error::Validation(format!(
                "edge feature dim {} differs from node feature dim {}",
                self.edge_features.cols(),
                self.node_features.cols()
            )));
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for (i, &(u, v)) in self.edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "edge {i} ({u}, {v}) has an endpoint outside [0, {n})"
                )));
            }
            if u == v {
                return Err(Error::Validation(format!("edge {i} is a self-loop on node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Validation(format!("edge {i} ({u}, {v}) is a duplicate")));
            }
        }
        if !self.node_features.is_finite() {
            return Err(Error::Validation("node_features contain non-finite values".into()));
        }
        if !self.edge_features.is_finite() {
            return Err(Error::Validation("edge_features contain non-finite values".into()));
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != n {
                return Err(Error::Validation(format!(
                    "{} node labels for {n} nodes",
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn edge_features(&self) -> &Tensor {
        &self.edge_features
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn graph_label(&self) -> Option<i64> {
        self.graph_label
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Number of distinct label values (`max + 1`), zero when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.node_labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<TAGraph> {
        let n = self.num_nodes;
        if perm.len() != n {
            return Err(Error::arg(format!("permutation of length {} for {n} nodes", perm.len())));
        }
        let mut inverse = vec![usize::MAX; n];
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inverse[new] != usize::MAX {
                return Err(Error::arg("not a permutation"));
            }
            inverse[new] = old;
        }
        let node_features = self.node_features.select_rows(&inverse);
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let node_labels = self
            .node_labels
            .as_ref()
            .map(|l| inverse.iter().map(|&o| l[o]).collect());
        TAGraph::new(
            n,
            edges,
            node_features,
            self.edge_features.clone(),
            node_labels,
            self.domain_id,
            self.graph_label,
        )
    }

    /// Disjoint union of several graphs. Node ids are offset in input order.
    /// Returns the union plus the per-node domain ids.
    pub fn disjoint_union(graphs: &[&TAGraph]) -> Result<(TAGraph, Vec<usize>)> {
        if graphs.is_empty() {
            return Err(Error::arg("disjoint union of zero graphs"));
        }
        let d = graphs[0].feature_dim();
        let mut edges = Vec::new();
        let mut domains = Vec::new();
        let mut labels: Option<Vec<usize>> = Some(Vec::new());
        let mut offset = 0;
        for g in graphs {
            if g.feature_dim() != d {
                return Err(Error::Dimension {
                    op: "disjoint_union",
                    left: (0, d),
                    right: (0, g.feature_dim()),
                });
            }
            edges.extend(g.edges.iter().map(|&(u, v)| (u + offset, v + offset)));
            domains.extend(std::iter::repeat(g.domain_id).take(g.num_nodes));
            labels = match (labels, &g.node_labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
            offset += g.num_nodes;
        }
        let nf: Vec<&Tensor> = graphs.iter().map(|g| &g.node_features).collect();
        let ef_owned: Vec<Tensor> = graphs
            .iter()
            .map(|g| {
                if g.num_edges() == 0 {
                    Tensor::zeros(0, d)
                } else {
                    g.edge_features.clone()
                }
            })
            .collect();
        let ef: Vec<&Tensor> = ef_owned.iter().collect();
        let union = TAGraph::new(
            offset,
            edges,
            Tensor::vstack(&nf)?,
            Tensor::vstack(&ef)?,
            labels,
            graphs[0].domain_id,
            None,
        )?;
        Ok((union, domains))
    }
}
