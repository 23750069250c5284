//! Fits the prototype + linear head on top of a pretrained encoder.
use mocgvq::config::TrainConfig;
use mocgvq::data::{synthetic_corpus, SyntheticDomain};
use mocgvq::finetune::{finetune, FinetuneConfig, Splits};
use mocgvq::train::pretrain;

fn main() -> mocgvq::Result<()> {
    let (corpus, _) = synthetic_corpus(&SyntheticDomain::default(), 2, 42)?;
    let cfg = TrainConfig::default();
    let model = pretrain(&corpus, &cfg, None)?.model;
    let g = &corpus.graphs()[0];
    let splits = Splits::random(g.num_nodes(), 0.5, 0)?;
    for t in [0.0, 0.5, 1.0] {
        let r = finetune(&model, g, &splits, &FinetuneConfig { t, ..FinetuneConfig::default() })?;
        println!(
            "t={t:.1}: test accuracy {:.3}, loss {:.3} -> {:.3}",
            r.test_accuracy,
            r.train_losses[0],
            r.train_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
