//! Short pretraining run on the desk corpus, interrupted and resumed.
use mocgvq::config::TrainConfig;
use mocgvq::data::{synthetic_corpus, SyntheticDomain};
use mocgvq::train::{pretrain, Trainer};

fn main() -> mocgvq::Result<()> {
    let (corpus, _) = synthetic_corpus(&SyntheticDomain::default(), 2, 42)?;
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let full = pretrain(&corpus, &cfg, None)?;
    for row in full.log.iter().step_by(5) {
        println!("{}", row.csv_line());
    }

    let mut first = Trainer::new(&corpus, &cfg)?;
    first.run_until(7)?;
    let (paused, _) = first.into_parts();
    let mut resumed = Trainer::resume(&corpus, paused)?;
    resumed.run()?;
    let same = mocgvq::checkpoint::to_bytes(resumed.model()) == full.checkpoint;
    println!("resumed run identical to uninterrupted: {same}");
    Ok(())
}
