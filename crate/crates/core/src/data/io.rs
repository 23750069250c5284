use super::TAGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct GraphFile {
    n: usize,
    domain_id: usize,
    edges: Vec<[usize; 2]>,
    node_features: Vec<Vec<f64>>,
    edge_features: Vec<Vec<f64>>,
    #[serde(default)]
    node_labels: Option<Vec<usize>>,
    #[serde(default)]
    graph_label: Option<i64>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(|r| r.to_vec()).collect()
}

fn tensor_of(rows: &[Vec<f64>], cols_if_empty: usize, field: &str) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, cols_if_empty));
    }
    Tensor::from_rows(rows).map_err(|e| Error::Parse {
        context: format!("field `{field}`"),
        detail: e.to_string(),
    })
}

pub fn graph_to_json(g: &TAGraph) -> String {
    let file = GraphFile {
        n: g.num_nodes(),
        domain_id: g.domain_id(),
        edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
        node_features: rows_of(g.node_features()),
        edge_features: rows_of(g.edge_features()),
        node_labels: g.node_labels().map(|l| l.to_vec()),
        graph_label: g.graph_label(),
    };
    serde_json::to_string(&file).expect("graph serialization cannot fail")
}

pub fn graph_from_json(text: &str, origin: &str) -> Result<TAGraph> {
    let f: GraphFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: format!("{origin} line {} column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    let x = tensor_of(&f.node_features, 0, "node_features")?;
    let ef = tensor_of(&f.edge_features, x.cols(), "edge_features")?;
    let edges = f.edges.iter().map(|&[u, v]| (u, v)).collect();
    TAGraph::new(f.n, edges, x, ef, f.node_labels, f.domain_id, f.graph_label)
}

pub fn read_graph_file(path: impl AsRef<Path>) -> Result<TAGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    graph_from_json(&text, &path.display().to_string())
}

pub fn write_graph_file(g: &TAGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, graph_to_json(g) + "\n")?;
    Ok(())
}
