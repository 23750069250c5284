//! Seeded training protocols used by the longer tests.

use super::{mean_pairwise_angle, random, unit_rows};
use mocgvq::checkpoint;
use mocgvq::config::TrainConfig;
use mocgvq::data::{synthetic_corpus, DomainCorpus, SyntheticDomain, TAGraph};
use mocgvq::diagnostics::{angular_uniformity, utilization_entropy};
use mocgvq::finetune::mean_few_shot_accuracy;
use mocgvq::model::MocModel;
use mocgvq::objectives::{load_balance, triple_contrastive, SelfTerms};
use mocgvq::optim::{AdamWConfig, ParamStore};
use mocgvq::quantizer::CodebookBank;
use mocgvq::train::{pretrain, Trainer};

/// Two default-shaped synthetic domains.
pub fn desk_corpus() -> DomainCorpus {
    synthetic_corpus(&SyntheticDomain::default(), 2, 42).unwrap().0
}

pub struct SanityRun {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub all_finite: bool,
    pub repeat_identical: bool,
    pub resume_identical: bool,
    pub steps: u64,
}

fn eval_loss(model: &MocModel, corpus: &DomainCorpus) -> f64 {
    let graphs: Vec<&TAGraph> = corpus.graphs().iter().collect();
    model.eval_loss(&graphs, 0).unwrap().0
}

/// Default-config pretraining on [`desk_corpus`]: loss ratio, finiteness,
/// repeatability and resume-at-midpoint equivalence.
pub fn desk_sanity() -> SanityRun {
    let corpus = desk_corpus();
    let cfg = TrainConfig::default();
    let initial_loss = eval_loss(&MocModel::init(&cfg, corpus.feature_dim()).unwrap(), &corpus);
    let first = pretrain(&corpus, &cfg, None).unwrap();
    let second = pretrain(&corpus, &cfg, None).unwrap();
    let steps = first.model.store.step_count();

    let mut half = Trainer::new(&corpus, &cfg).unwrap();
    half.run_until(steps / 2).unwrap();
    let bytes = checkpoint::to_bytes(half.model());
    let mut resumed = Trainer::resume(&corpus, checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.run().unwrap();
    let resumed_bytes = checkpoint::to_bytes(resumed.model());

    let finite_log = first.log.iter().all(|r| {
        [r.loss_total, r.loss_feat, r.loss_topo, r.loss_con, r.loss_load, r.codebook_entropy, r.mean_angular_dist]
            .iter()
            .all(|v| v.is_finite())
    });
    let finite_params = first.model.store.iter().all(|(_, _, p)| p.value.is_finite());
    SanityRun {
        initial_loss,
        final_loss: eval_loss(&first.model, &corpus),
        all_finite: finite_log && finite_params,
        repeat_identical: first.checkpoint == second.checkpoint,
        resume_identical: resumed_bytes == first.checkpoint,
        steps,
    }
}

pub const ABLATIONS: [&str; 5] = ["no_fusion", "single_codebook", "commitment_loss", "classic_load_loss", "no_load_loss"];
pub const ABLATION_SEEDS: u64 = 5;
pub const ABLATION_EPOCHS: u64 = 150;

#[derive(Clone, Copy, Debug)]
pub struct RunMetrics {
    /// Mean 4-way 1-shot prototype accuracy over both domains.
    pub accuracy: f64,
    /// Mean pairwise angle among all code vectors.
    pub code_dispersion: f64,
    /// Utilization entropy of the corpus embeddings.
    pub utilization: f64,
}

fn evaluate(model: &MocModel, corpus: &DomainCorpus) -> RunMetrics {
    let mut accuracy = 0.0;
    let mut acts = Vec::new();
    for g in corpus.graphs() {
        accuracy += mean_few_shot_accuracy(model, g, 4, 1, 40, 100, 7).unwrap() / corpus.len() as f64;
        acts.extend(model.embed(g).unwrap().outcome.activations().collect::<Vec<_>>());
    }
    RunMetrics {
        accuracy,
        code_dispersion: angular_uniformity(model.codes()).unwrap().mean,
        utilization: utilization_entropy(acts),
    }
}

/// Paired runs: for each seed, the default pipeline followed by each
/// ablation, all on the same corpus and initialization seed.
pub fn ablation_grid() -> Vec<(RunMetrics, Vec<RunMetrics>)> {
    let tmpl = SyntheticDomain::new(0, 150, 5.0, 32, 4);
    (0..ABLATION_SEEDS)
        .map(|s| {
            let (corpus, _) = synthetic_corpus(&tmpl, 2, 100 + s).unwrap();
            let run = |flag: Option<&str>| {
                let mut cfg = TrainConfig {
                    epochs: ABLATION_EPOCHS,
                    seed: 100 + s,
                    ..TrainConfig::default()
                };
                if let Some(f) = flag {
                    cfg.ablation.set(f).unwrap();
                }
                evaluate(&pretrain(&corpus, &cfg, None).unwrap().model, &corpus)
            };
            let base = run(None);
            (base, ABLATIONS.iter().map(|f| run(Some(f))).collect())
        })
        .collect()
}

/// Mean pairwise angle of `h` and `z` before and after one plain gradient
/// step of the contrastive loss alone on unit-norm points. Each `z_i` is a
/// unit-norm perturbation of `h_i`, as a quantized embedding would be.
pub struct UniformityStep {
    pub h: (f64, f64),
    pub z: (f64, f64),
}

pub fn uniformity_step(seed: u64, n: usize, dim: usize, lr: f64) -> UniformityStep {
    let mut rng = super::rng(seed);
    let h = unit_rows(&random(n, dim, &mut rng));
    let mut z = h.clone();
    z.axpy(0.1, &random(n, dim, &mut rng)).unwrap();
    let z = unit_rows(&z);
    let (_, gh, gz) = triple_contrastive(&h, &z, 0.5, SelfTerms::Include).unwrap();
    let mut h2 = h.clone();
    h2.axpy(-lr, &gh).unwrap();
    let mut z2 = z.clone();
    z2.axpy(-lr, &gz).unwrap();
    UniformityStep {
        h: (mean_pairwise_angle(&h), mean_pairwise_angle(&unit_rows(&h2))),
        z: (mean_pairwise_angle(&z), mean_pairwise_angle(&unit_rows(&z2))),
    }
}

/// Load-loss values over `steps` optimizer steps on the gate parameters,
/// with fixed hidden states standing in for a frozen encoder.
pub fn load_descent(seed: u64, steps: usize, lr: f64) -> Vec<f64> {
    let mut rng = super::rng(seed);
    let mut store = ParamStore::new();
    let bank = CodebookBank::init(&mut store, "bank", 4, 8, 6, seed).unwrap();
    let h = random(40, 6, &mut rng);
    let domains: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let adam = AdamWConfig {
        lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut values = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let (scores, cache) = bank.gate(&store, &h).unwrap();
        let (v, g) = load_balance(&scores, &domains).unwrap();
        values.push(v);
        bank.gate_backward(&mut store, &cache, &g).unwrap();
        store.adaptive_moment_step(&adam).unwrap();
    }
    values
}
