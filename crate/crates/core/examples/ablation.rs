//! Trains the default pipeline and one ablation, then compares them.
//! Usage: cargo run --release --example ablation -- [flag]
use mocgvq::config::TrainConfig;
use mocgvq::data::{synthetic_corpus, SyntheticDomain};
use mocgvq::diagnostics::utilization_entropy;
use mocgvq::finetune::mean_few_shot_accuracy;
use mocgvq::train::pretrain;

fn main() -> mocgvq::Result<()> {
    let flag = std::env::args().nth(1).unwrap_or_else(|| "single_codebook".into());
    let (corpus, _) = synthetic_corpus(&SyntheticDomain::new(0, 150, 5.0, 32, 4), 2, 100)?;
    let base = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let mut ablated = base.clone();
    ablated.ablation.set(&flag)?;

    for (name, cfg) in [("default", base), (flag.as_str(), ablated)] {
        let model = pretrain(&corpus, &cfg, None)?.model;
        let mut acc = 0.0;
        let mut entropy = 0.0;
        for g in corpus.graphs() {
            acc += mean_few_shot_accuracy(&model, g, 4, 1, 40, 50, 7)?;
            entropy += utilization_entropy(model.embed(g)?.outcome.activations());
        }
        let n = corpus.len() as f64;
        println!("{name:>18}: 4-way 1-shot {:.3}, utilization entropy {:.3}", acc / n, entropy / n);
    }
    Ok(())
}
