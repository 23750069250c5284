use super::{read_graph_file, seeded_stream, TAGraph};
use crate::error::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Graphs drawn with replacement in proportion to their sampling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCorpus {
    graphs: Vec<TAGraph>,
    weights: Vec<f64>,
}

impl DomainCorpus {
    pub fn new(graphs: Vec<TAGraph>, weights: Vec<f64>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::state("corpus has no graphs"));
        }
        if graphs.len() != weights.len() {
            return Err(Error::arg(format!(
                "{} graphs but {} weights",
                graphs.len(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::arg(format!(
                "sampling weight of graph {i} must be positive, got {}",
                weights[i]
            )));
        }
        let d = graphs[0].feature_dim();
        if let Some(i) = graphs.iter().position(|g| g.feature_dim() != d) {
            return Err(Error::Validation(format!(
                "graph {i} has feature dim {}, corpus uses {d}",
                graphs[i].feature_dim()
            )));
        }
        Ok(DomainCorpus { graphs, weights })
    }

    /// Equal weights.
    pub fn uniform(graphs: Vec<TAGraph>) -> Result<Self> {
        let w = vec![1.0; graphs.len()];
        Self::new(graphs, w)
    }

    pub fn graphs(&self) -> &[TAGraph] {
        &self.graphs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs[0].feature_dim()
    }

    pub fn max_domain_id(&self) -> usize {
        self.graphs.iter().map(|g| g.domain_id()).max().unwrap_or(0)
    }

    /// Indices of `batch_size` graphs drawn with replacement.
    pub fn sample_indices(&self, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
        if self.graphs.is_empty() {
            return Err(Error::state("cannot sample from an empty corpus"));
        }
        if batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        let dist = WeightedIndex::new(&self.weights).map_err(|e| Error::state(e.to_string()))?;
        let mut rng = seeded_stream(seed, 21);
        Ok((0..batch_size).map(|_| dist.sample(&mut rng)).collect())
    }

    pub fn sample_batch(&self, batch_size: usize, seed: u64) -> Result<Vec<&TAGraph>> {
        Ok(self
            .sample_indices(batch_size, seed)?
            .into_iter()
            .map(|i| &self.graphs[i])
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub weight: f64,
}

/// Reads a corpus manifest (`[{"path", "weight"}, ...]`). Relative paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DomainCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        detail: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut graphs = Vec::with_capacity(entries.len());
    let mut weights = Vec::with_capacity(entries.len());
    for e in &entries {
        let p = Path::new(&e.path);
        let full = if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
        graphs.push(read_graph_file(&full)?);
        weights.push(e.weight);
    }
    DomainCorpus::new(graphs, weights)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).map_err(|e| Error::state(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
