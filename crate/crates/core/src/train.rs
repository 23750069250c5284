//! The pretraining loop and its metric log.

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::DomainCorpus;
use crate::diagnostics::{angular_uniformity, utilization_entropy};
use crate::error::{Error, Result};
use crate::model::{Batch, MocModel};
use crate::optim::AdamWConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const METRIC_HEADER: &str =
    "step,loss_total,loss_feat,loss_topo,loss_con,loss_load,codebook_entropy,mean_angular_dist";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_feat: f64,
    pub loss_topo: f64,
    pub loss_con: f64,
    pub loss_load: f64,
    /// Utilization entropy of this step's batch activations.
    pub codebook_entropy: f64,
    /// Mean pairwise angle among all code vectors after the step.
    pub mean_angular_dist: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_feat,
            self.loss_topo,
            self.loss_con,
            self.loss_load,
            self.codebook_entropy,
            self.mean_angular_dist
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Seed for all randomness of optimizer step `step`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `epochs × ceil(corpus_len / batch_size)`; an epoch is corpus-size draws.
pub fn total_steps(cfg: &TrainConfig, corpus_len: usize) -> u64 {
    cfg.epochs * corpus_len.div_ceil(cfg.batch_size) as u64
}

/// Step-by-step driver; the model's optimizer step count is the position.
pub struct Trainer<'a> {
    corpus: &'a DomainCorpus,
    model: MocModel,
    total_steps: u64,
    log: Vec<MetricRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a DomainCorpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MocModel::init(cfg, corpus.feature_dim())?;
        Self::resume(corpus, model)
    }

    /// Continues from a model (typically a loaded checkpoint).
    pub fn resume(corpus: &'a DomainCorpus, model: MocModel) -> Result<Self> {
        if corpus.feature_dim() != model.input_dim {
            return Err(Error::arg(format!(
                "corpus feature dim {} but model expects {}",
                corpus.feature_dim(),
                model.input_dim
            )));
        }
        Ok(Trainer {
            corpus,
            total_steps: total_steps(&model.cfg, corpus.len()),
            model,
            log: Vec::new(),
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.model.store.step_count()
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.steps_done() >= self.total_steps
    }

    pub fn model(&self) -> &MocModel {
        &self.model
    }

    pub fn into_parts(self) -> (MocModel, Vec<MetricRow>) {
        (self.model, self.log)
    }

    /// Rows logged by this trainer (not those before a resume).
    pub fn log(&self) -> &[MetricRow] {
        &self.log
    }

    pub fn step(&mut self) -> Result<MetricRow> {
        let step = self.steps_done();
        let cfg = &self.model.cfg;
        let seed = step_seed(cfg.seed, step);
        let graphs = self.corpus.sample_batch(cfg.batch_size, seed)?;
        let batch = Batch::new(&graphs, cfg, seed)?;
        let diverged = |e: Error| Error::Diverged {
            step,
            detail: e.to_string(),
        };
        let result = self
            .model
            .net
            .forward_backward(&mut self.model.store, &batch, true, seed)
            .map_err(|e| match e {
                Error::NonFinite(_) => diverged(e),
                e => e,
            })?;
        self.model.store.clip_grad_norm(cfg.grad_clip);
        let adam = AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        self.model.store.adaptive_moment_step(&adam).map_err(diverged)?;
        self.model
            .net
            .encoder
            .update_running_stats(&mut self.model.store, &result.encode)?;
        let row = MetricRow {
            step,
            loss_total: result.total,
            loss_feat: result.parts.feat,
            loss_topo: result.parts.topo,
            loss_con: result.parts.con,
            loss_load: result.parts.load,
            codebook_entropy: utilization_entropy(result.outcome.activations()),
            mean_angular_dist: angular_uniformity(self.model.codes())?.mean,
        };
        log::debug!("step {step}: total {:.6}", row.loss_total);
        self.log.push(row);
        Ok(row)
    }

    /// Runs until `step` optimizer steps are done (capped at the total).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.steps_done() < step.min(self.total_steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps)
    }
}

/// Trained model, its metric log and the checkpoint bytes.
pub struct PretrainOutput {
    pub model: MocModel,
    pub log: Vec<MetricRow>,
    pub checkpoint: Vec<u8>,
}

/// Full pretraining run. With `out_dir`, writes `checkpoint.bin` and
/// `metrics.csv` there.
pub fn pretrain(corpus: &DomainCorpus, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<PretrainOutput> {
    let mut trainer = Trainer::new(corpus, cfg)?;
    log::info!("pretraining for {} steps", trainer.total_steps());
    trainer.run()?;
    let (model, log) = trainer.into_parts();
    let checkpoint = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("metrics.csv"), metrics_csv(&log))?;
            checkpoint::save(&model, dir.join("checkpoint.bin"))?
        }
        None => checkpoint::to_bytes(&model),
    };
    Ok(PretrainOutput { model, log, checkpoint })
}
