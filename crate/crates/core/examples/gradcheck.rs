//! Finite-difference check of the contrastive loss gradient.
use mocgvq::gradcheck::check_tensor;
use mocgvq::objectives::{triple_contrastive, SelfTerms};
use mocgvq::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mocgvq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut random = |r: usize, c: usize| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let h = random(6, 4)?;
    let z = random(6, 4)?;
    let (_, gh, gz) = triple_contrastive(&h, &z, 0.5, SelfTerms::Include)?;
    let loss = |h: &Tensor, z: &Tensor| triple_contrastive(h, z, 0.5, SelfTerms::Include).map(|r| r.0).unwrap();
    let ch = check_tensor("h", &h, &gh, 1e-5, |p| loss(p, &z));
    let cz = check_tensor("z", &z, &gz, 1e-5, |p| loss(&h, p));
    for (name, c) in [("dL/dh", ch), ("dL/dz", cz)] {
        println!("{name}: {} coords, max relative error {:.2e}, pass {}", c.checked, c.max_rel_err, c.passes(1e-4));
    }
    Ok(())
}
