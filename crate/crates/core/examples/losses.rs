//! Evaluates each pretraining objective on small hand-made inputs.
use mocgvq::objectives::{commitment, feature_reconstruction, importance_balance, load_balance, triple_contrastive, SelfTerms};
use mocgvq::tensor::Tensor;

fn main() -> mocgvq::Result<()> {
    let x = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])?;
    let noisy = x.map(|v| v + 0.1);
    let (feat, _) = feature_reconstruction(&noisy, &x)?;
    println!("feature reconstruction: {feat:.4}");

    let (con, _, _) = triple_contrastive(&x, &noisy, 0.5, SelfTerms::Include)?;
    println!("triple contrastive: {con:.4}");

    let (com, _) = commitment(&x, &noisy)?;
    println!("commitment: {com:.4}");

    let scores = Tensor::from_rows(&[[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]])?;
    let (load, _) = load_balance(&scores, &[0, 0, 1])?;
    let (imp, _) = importance_balance(&scores)?;
    println!("domain-aware load: {load:.4}, importance: {imp:.4}");
    Ok(())
}
