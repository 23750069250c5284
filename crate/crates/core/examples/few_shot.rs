//! Few-shot episodes from support prototypes and zero-shot episodes from
//! class descriptors.
use mocgvq::config::TrainConfig;
use mocgvq::data::{class_descriptors, domain_seed, synthetic_corpus, SyntheticDomain};
use mocgvq::finetune::{mean_few_shot_accuracy, zero_shot_episode};
use mocgvq::train::pretrain;

fn main() -> mocgvq::Result<()> {
    let (corpus, specs) = synthetic_corpus(&SyntheticDomain::default(), 2, 42)?;
    let cfg = TrainConfig::default();
    let model = pretrain(&corpus, &cfg, None)?.model;
    let g = &corpus.graphs()[1];
    for k in [1, 5] {
        let acc = mean_few_shot_accuracy(&model, g, 4, k, 20, 50, 0)?;
        println!("4-way {k}-shot: {acc:.3}");
    }
    let desc = class_descriptors(&specs[1], domain_seed(42, 1));
    let episodes = 50;
    let mut total = 0.0;
    for e in 0..episodes {
        total += zero_shot_episode(&model, g, &desc, 4, 20, e)?;
    }
    println!("4-way zero-shot: {:.3}", total / episodes as f64);
    Ok(())
}
