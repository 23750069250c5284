//! Attributed graphs, the synthetic multi-domain generator, dual masking,
//! weighted corpus sampling and the JSON graph format.

mod corpus;
mod graph;
mod io;
mod mask;
mod synth;

pub use corpus::{load_manifest, write_manifest, DomainCorpus, ManifestEntry};
pub use graph::TAGraph;
pub use io::{graph_from_json, graph_to_json, read_graph_file, write_graph_file};
pub use mask::{apply_masks, MaskedGraph};
pub use synth::{class_descriptors, domain_seed, generate_synthetic_domain, synthetic_corpus, SyntheticDomain};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` derived from `seed`.
pub(crate) fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
