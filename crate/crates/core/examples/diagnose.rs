//! Pretrains briefly and writes the diagnostics report to a temp dir.
use mocgvq::checkpoint::checkpoint_hash;
use mocgvq::config::TrainConfig;
use mocgvq::data::{synthetic_corpus, SyntheticDomain};
use mocgvq::report::{diagnose, write_report};
use mocgvq::train::pretrain;

fn main() -> mocgvq::Result<()> {
    let (corpus, _) = synthetic_corpus(&SyntheticDomain::default(), 3, 42)?;
    let cfg = TrainConfig::default();
    let out = pretrain(&corpus, &cfg, None)?;
    let report = diagnose(&out.model, &corpus, &checkpoint_hash(&out.checkpoint))?;

    let kl = &report.pairwise_domain_kl;
    for a in 0..kl.size() {
        let row: Vec<String> = (0..kl.size()).map(|b| format!("{:8.3}", kl.get(a, b).unwrap_or(0.0))).collect();
        println!("KL[{a}] {}", row.join(" "));
    }
    println!(
        "utilization {:.3}/{:.3}, effective rank {:.2}, mean angle h {:.3}",
        report.codebook_utilization_entropy,
        report.max_utilization_entropy,
        report.effective_rank,
        report.mean_pairwise_angular_distance_h.mean
    );
    let dir = std::env::temp_dir().join("mocgvq-example-diagnose");
    std::fs::create_dir_all(&dir)?;
    for p in write_report(&report, &dir, "diagnose")? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
