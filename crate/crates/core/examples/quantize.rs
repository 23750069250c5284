//! Mixture-of-codebooks routing on random embeddings.
use mocgvq::diagnostics::utilization_entropy;
use mocgvq::optim::ParamStore;
use mocgvq::quantizer::{vq_lookup, CodebookBank};
use mocgvq::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mocgvq::Result<()> {
    let (m, k, d, top) = (4, 8, 6, 2);
    let mut store = ParamStore::new();
    let bank = CodebookBank::init(&mut store, "vq", m, k, d, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = Tensor::from_vec(50, d, (0..50 * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let out = bank.quantize(&store, &h, top)?;
    for n in 0..3 {
        println!(
            "node {n}: codebooks {:?} weights {:.3?} codes {:?}",
            out.active[n], out.weights[n], out.code_index[n]
        );
    }
    println!(
        "utilization entropy {:.3} of max {:.3}",
        utilization_entropy(out.activations()),
        ((m * k) as f64).ln()
    );

    // a single codebook reduces to nearest-code lookup
    let (idx, _) = vq_lookup(h.row(0), &bank.codebook(&store, 0))?;
    let (single, _) = bank.quantize_single(&store, &h, 0)?;
    assert_eq!(idx, single[0]);
    println!("nearest code of node 0 in codebook 0: {idx}");
    Ok(())
}
