use super::{seeded_stream, DomainCorpus, TAGraph};
use crate::error::{Error, Result};
use crate::tensor::{normalize_rows, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Base seed for the per-domain streams (offset and shared edge vector), so
/// that two graphs of the same domain agree on them regardless of `seed`.
const DOMAIN_STREAM_BASE: u64 = 0x5EED_D0A1_0000;

/// Planted-partition generator for one synthetic domain.
///
/// Node features are `class centroid + domain offset + N(0, node_noise²)`.
/// Edge features are a domain-wide vector plus `edge_topic_weight` times the
/// mean of the two endpoint centroids, plus small noise: the "text" of an
/// edge names the topics it connects, without the node-level noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomain {
    pub domain_id: usize,
    pub num_nodes: usize,
    pub avg_degree: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Intra-class over inter-class edge probability.
    pub homophily_ratio: f64,
    /// Std-dev of each centroid coordinate.
    pub centroid_scale: f64,
    /// Std-dev of each domain-offset coordinate.
    pub domain_offset_scale: f64,
    pub node_noise: f64,
    pub edge_noise: f64,
    pub edge_topic_weight: f64,
    /// Scale every node and edge feature row to unit norm, as sentence
    /// encoders do.
    pub unit_norm_features: bool,
}

impl Default for SyntheticDomain {
    /// The desk-scale domain: 300 nodes, average degree 5, 32-dim features,
    /// 4 classes.
    fn default() -> Self {
        SyntheticDomain::new(0, 300, 5.0, 32, 4)
    }
}

impl SyntheticDomain {
    pub fn new(
        domain_id: usize,
        num_nodes: usize,
        avg_degree: f64,
        feature_dim: usize,
        num_classes: usize,
    ) -> Self {
        SyntheticDomain {
            domain_id,
            num_nodes,
            avg_degree,
            feature_dim,
            num_classes,
            homophily_ratio: 4.0,
            centroid_scale: 0.25,
            domain_offset_scale: 1.0,
            node_noise: 0.25,
            edge_noise: 0.01,
            edge_topic_weight: 1.0,
            unit_norm_features: false,
        }
    }

    fn check(&self) -> Result<()> {
        if self.num_nodes < 2 {
            return Err(Error::arg(format!("n must be >= 2, got {}", self.num_nodes)));
        }
        if !(self.avg_degree >= 1.0) {
            return Err(Error::arg(format!("avg_degree must be >= 1, got {}", self.avg_degree)));
        }
        if self.num_classes < 2 {
            return Err(Error::arg(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::arg("feature_dim must be positive"));
        }
        Ok(())
    }

    /// Class centroids, one row per class.
    pub fn centroids(&self, seed: u64) -> Tensor {
        let mut rng = seeded_stream(seed, 1);
        let data = (0..self.num_classes * self.feature_dim)
            .map(|_| self.centroid_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_vec(self.num_classes, self.feature_dim, data).unwrap()
    }

    pub fn domain_offset(&self) -> Vec<f64> {
        let mut rng = seeded_stream(DOMAIN_STREAM_BASE + self.domain_id as u64, 0);
        (0..self.feature_dim)
            .map(|_| self.domain_offset_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn domain_edge_vector(&self) -> Vec<f64> {
        let mut rng = seeded_stream(DOMAIN_STREAM_BASE + self.domain_id as u64, 1);
        (0..self.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Inter-class edge probability that hits `avg_degree` in expectation
    /// for equally sized classes.
    fn inter_class_probability(&self) -> f64 {
        let n = self.num_nodes as f64;
        let per_class = n / self.num_classes as f64;
        let weight = self.homophily_ratio * (per_class - 1.0).max(0.0) + (n - per_class);
        (self.avg_degree / weight.max(1e-12)).min(1.0 / self.homophily_ratio)
    }

    pub fn generate(&self, seed: u64) -> Result<TAGraph> {
        self.check()?;
        let n = self.num_nodes;
        let d = self.feature_dim;

        let mut class_rng = seeded_stream(seed, 0);
        let labels: Vec<usize> = (0..n)
            .map(|_| class_rng.gen_range(0..self.num_classes))
            .collect();

        let p_out = self.inter_class_probability();
        let p_in = (p_out * self.homophily_ratio).min(1.0);
        let mut edge_rng = seeded_stream(seed, 2);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let p = if labels[u] == labels[v] { p_in } else { p_out };
                if edge_rng.gen::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }

        let centroids = self.centroids(seed);
        let offset = self.domain_offset();
        let node_noise = Normal::new(0.0, self.node_noise).map_err(|e| Error::arg(e.to_string()))?;
        let mut noise_rng = seeded_stream(seed, 3);
        let mut x = Tensor::zeros(n, d);
        for (i, &c) in labels.iter().enumerate() {
            let row = x.row_mut(i);
            for j in 0..d {
                row[j] = centroids.get(c, j) + offset[j] + node_noise.sample(&mut noise_rng);
            }
        }

        let base = self.domain_edge_vector();
        let edge_noise = Normal::new(0.0, self.edge_noise).map_err(|e| Error::arg(e.to_string()))?;
        let mut enoise_rng = seeded_stream(seed, 4);
        let mut ef = Tensor::zeros(edges.len(), d);
        for (e, &(u, v)) in edges.iter().enumerate() {
            let (cu, cv) = (centroids.row(labels[u]), centroids.row(labels[v]));
            for (j, f) in ef.row_mut(e).iter_mut().enumerate() {
                let topic = 0.5 * (cu[j] + cv[j]);
                *f = base[j] + self.edge_topic_weight * topic + edge_noise.sample(&mut enoise_rng);
            }
        }

        if self.unit_norm_features {
            x = normalize_rows(&x).0;
            ef = normalize_rows(&ef).0;
        }
        TAGraph::new(n, edges, x, ef, Some(labels), self.domain_id, None)
    }
}

pub fn generate_synthetic_domain(
    domain_id: usize,
    n: usize,
    avg_degree: f64,
    d_in: usize,
    num_classes: usize,
    seed: u64,
) -> Result<TAGraph> {
    SyntheticDomain::new(domain_id, n, avg_degree, d_in, num_classes).generate(seed)
}

/// Seed of domain `domain` within a corpus generated from `seed`.
pub fn domain_seed(seed: u64, domain: usize) -> u64 {
    seed.wrapping_add(1_000 * domain as u64)
}

/// `num_domains` graphs sharing `template`'s shape, each with its own domain
/// id, offset and seed. Returns the corpus (uniform weights) and the
/// per-domain specs.
pub fn synthetic_corpus(
    template: &SyntheticDomain,
    num_domains: usize,
    seed: u64,
) -> Result<(DomainCorpus, Vec<SyntheticDomain>)> {
    let specs: Vec<SyntheticDomain> = (0..num_domains)
        .map(|d| SyntheticDomain {
            domain_id: d,
            ..template.clone()
        })
        .collect();
    let graphs = specs
        .iter()
        .map(|s| s.generate(domain_seed(seed, s.domain_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((DomainCorpus::uniform(graphs)?, specs))
}

/// Noise-free class feature vectors (centroid + domain offset) for the
/// domain generated with `seed`; these stand in for class-name embeddings in
/// zero-shot evaluation.
pub fn class_descriptors(spec: &SyntheticDomain, seed: u64) -> Tensor {
    let mut c = spec.centroids(seed);
    let offset = spec.domain_offset();
    for r in 0..c.rows() {
        for (v, o) in c.row_mut(r).iter_mut().zip(&offset) {
            *v += o;
        }
    }
    if spec.unit_norm_features {
        c = normalize_rows(&c).0;
    }
    c
}
