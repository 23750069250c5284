//! Writes a two-domain synthetic corpus to a temp dir and reads it back.
use mocgvq::cli::GenConfig;
use mocgvq::data::{load_manifest, read_graph_file};

fn main() -> mocgvq::Result<()> {
    let dir = std::env::temp_dir().join("mocgvq-example-corpus");
    let manifest = GenConfig::default().generate(&dir)?;
    let corpus = load_manifest(&manifest)?;
    for g in corpus.graphs() {
        println!(
            "domain {}: {} nodes, {} edges, {} classes, dim {}",
            g.domain_id(),
            g.num_nodes(),
            g.num_edges(),
            g.num_classes(),
            g.feature_dim()
        );
    }
    let again = read_graph_file(dir.join("domain_0.json"))?;
    assert_eq!(&again, &corpus.graphs()[0]);
    println!("manifest at {}", manifest.display());
    Ok(())
}
