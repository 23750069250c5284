//! The full network: fusion encoder, codebook bank and decoder heads wired
//! according to a [`Pipeline`], with one combined forward/backward pass.

use crate::config::{AlignmentTerm, LoadTerm, Pipeline, TrainConfig};
use crate::data::{apply_masks, MaskedGraph, TAGraph};
use crate::encoder::{EncodeResult, EncoderConfig, FusionEncoder};
use crate::error::{Error, Result};
use crate::objectives::{
    commitment, importance_balance, load_balance, sample_negative_edges, total_loss, triple_contrastive,
    DecoderHeads, LossParts,
};
use crate::optim::{ParamId, ParamStore};
use crate::quantizer::{ste_backward, CodebookBank, QuantizeOutcome};
use crate::tensor::Tensor;

/// Parameter layout of the network; tensors live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub pipeline: Pipeline,
    pub tau: f64,
    pub encoder: FusionEncoder,
    pub bank: CodebookBank,
    pub heads: DecoderHeads,
}

/// A network together with the store that holds its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct MocModel {
    pub cfg: TrainConfig,
    pub input_dim: usize,
    pub net: Network,
    pub store: ParamStore,
}

/// One training or evaluation batch: the disjoint union of sampled graphs,
/// masked, with reconstruction targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub masked: MaskedGraph,
    /// Domain of every node in the union.
    pub domains: Vec<usize>,
    pub pos_edges: Vec<(usize, usize)>,
    pub neg_edges: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(graphs: &[&TAGraph], cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let (union, domains) = TAGraph::disjoint_union(graphs)?;
        let masked = apply_masks(&union, cfg.p_f, cfg.p_t, seed)?;
        let pos_edges = union.edges().to_vec();
        let neg_edges = sample_negative_edges(
            union.num_nodes(),
            &pos_edges,
            cfg.negative_ratio * pos_edges.len(),
            seed,
        );
        Ok(Batch {
            masked,
            domains,
            pos_edges,
            neg_edges,
        })
    }

    /// Unmasked single-graph batch (no negatives drawn).
    pub fn unmasked(g: &TAGraph) -> Self {
        Batch {
            masked: MaskedGraph::unmasked(g),
            domains: vec![g.domain_id(); g.num_nodes()],
            pos_edges: g.edges().to_vec(),
            neg_edges: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.masked.num_nodes()
    }
}

/// Result of [`Network::forward_backward`].
#[derive(Clone, Debug)]
pub struct StepResult {
    pub parts: LossParts,
    pub total: f64,
    pub encode: EncodeResult,
    pub outcome: QuantizeOutcome,
}

/// Quantized embeddings of a graph under the frozen network.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub hidden: Tensor,
    pub quantized: Tensor,
    pub outcome: QuantizeOutcome,
}

impl Network {
    pub fn init(cfg: &TrainConfig, input_dim: usize, store: &mut ParamStore) -> Result<Self> {
        let pipeline = cfg.apply_ablation()?;
        let encoder = FusionEncoder::init(
            EncoderConfig {
                input_dim,
                hidden_dim: cfg.hidden_dim,
                num_layers: cfg.num_layers,
                dropout: cfg.dropout,
                batch_norm: cfg.batch_norm,
                edge_fusion: pipeline.edge_fusion,
            },
            store,
            "encoder",
            cfg.seed,
        )?;
        let bank = CodebookBank::init(
            store,
            "bank",
            pipeline.num_codebooks,
            cfg.codebook_size,
            cfg.hidden_dim,
            cfg.seed,
        )?;
        let heads = DecoderHeads::init(store, "heads", cfg.hidden_dim, input_dim, cfg.seed)?;
        Ok(Network {
            pipeline,
            tau: cfg.tau,
            encoder,
            bank,
            heads,
        })
    }

    fn check_domains(&self, batch: &Batch) -> Result<()> {
        if self.pipeline.load == LoadTerm::DomainAware {
            let m = self.pipeline.num_codebooks;
            if let Some(&d) = batch.domains.iter().find(|&&d| d >= m) {
                return Err(Error::Config {
                    key: "num_codebooks".into(),
                    detail: format!("domain id {d} needs at least {} codebooks for the load term", d + 1),
                });
            }
        }
        Ok(())
    }

    /// Runs the pipeline on `batch`, accumulating weighted gradients of the
    /// total loss into `store`.
    pub fn forward_backward(
        &self,
        store: &mut ParamStore,
        batch: &Batch,
        training: bool,
        seed: u64,
    ) -> Result<StepResult> {
        self.check_domains(batch)?;
        let w = self.pipeline.weights;
        let enc = self.encoder.encode(store, &batch.masked, training, seed)?;
        let h = &enc.node_hidden;
        let outcome = self.bank.quantize(store, h, self.pipeline.top_k)?;
        let zq = &outcome.zq;
        let mut parts = LossParts::default();

        let (feat, g_feat, hg_feat) = self.heads.loss_feat(store, zq, batch.masked.base.node_features())?;
        parts.feat = feat;
        let mut grad_zq = g_feat.scale(w.feat);

        let topo = if batch.pos_edges.is_empty() {
            None
        } else {
            let (v, g, hg) = self.heads.loss_topo(store, zq, &batch.pos_edges, &batch.neg_edges)?;
            parts.topo = v;
            grad_zq.axpy(w.topo, &g)?;
            Some(hg)
        };

        let mut grad_h = Tensor::zeros(h.rows(), h.cols());
        match self.pipeline.alignment {
            AlignmentTerm::TripleContrastive(mode) => {
                let (v, gh, gz) = triple_contrastive(h, zq, self.tau, mode)?;
                parts.con = v;
                grad_h.axpy(w.con, &gh)?;
                grad_zq.axpy(w.con, &gz)?;
            }
            AlignmentTerm::Commitment => {
                let (v, gh) = commitment(h, zq)?;
                parts.con = v;
                grad_h.axpy(w.con, &gh)?;
            }
        }

        let load = match self.pipeline.load {
            LoadTerm::DomainAware => Some(load_balance(&outcome.scores, &batch.domains)?),
            LoadTerm::Importance => Some(importance_balance(&outcome.scores)?),
            LoadTerm::Off => None,
        };
        if let Some((v, _)) = &load {
            parts.load = *v;
        }
        let total = total_loss(&parts, &w)?;

        let ste = ste_backward(&outcome, store.value(self.bank.codes), &grad_zq)?;
        store.accumulate(self.bank.codes, &ste.codes)?;
        grad_h.add_assign(&ste.h)?;
        let mut grad_scores = ste.scores;
        if let Some((_, g)) = &load {
            grad_scores.axpy(w.load, g)?;
        }
        let cache = outcome
            .gate_cache
            .as_ref()
            .ok_or_else(|| Error::state("quantize outcome carries no gate cache"))?;
        grad_h.add_assign(&self.bank.gate_backward(store, cache, &grad_scores)?)?;
        self.heads.feature.accumulate(store, &hg_feat, w.feat)?;
        if let Some(hg) = &topo {
            self.heads.topology.accumulate(store, hg, w.topo)?;
        }
        self.encoder.encode_backward(store, &enc, &grad_h, None)?;

        Ok(StepResult {
            parts,
            total,
            encode: enc,
            outcome,
        })
    }

    /// Total loss with routing and code choices frozen to `reference`, in
    /// eval mode. Differentiating this surrogate reproduces the
    /// straight-through gradients of [`Network::forward_backward`].
    pub fn frozen_routing_loss(&self, store: &ParamStore, batch: &Batch, reference: &QuantizeOutcome) -> Result<f64> {
        let w = self.pipeline.weights;
        let enc = self.encoder.encode(store, &batch.masked, false, 0)?;
        let h = &enc.node_hidden;
        let (scores, _) = self.bank.gate(store, h)?;
        let zq = reference.frozen_forward(h, &scores, store.value(self.bank.codes))?;
        let mut parts = LossParts::default();
        parts.feat = self.heads.loss_feat(store, &zq, batch.masked.base.node_features())?.0;
        if !batch.pos_edges.is_empty() {
            parts.topo = self.heads.loss_topo(store, &zq, &batch.pos_edges, &batch.neg_edges)?.0;
        }
        parts.con = match self.pipeline.alignment {
            AlignmentTerm::TripleContrastive(mode) => triple_contrastive(h, &zq, self.tau, mode)?.0,
            // stop-gradient on the quantized side
            AlignmentTerm::Commitment => commitment(h, &reference.zq)?.0,
        };
        parts.load = match self.pipeline.load {
            LoadTerm::DomainAware => load_balance(&scores, &batch.domains)?.0,
            LoadTerm::Importance => importance_balance(&scores)?.0,
            LoadTerm::Off => 0.0,
        };
        total_loss(&parts, &w)
    }

    /// Eval-mode embeddings of an unmasked graph.
    pub fn embed(&self, store: &ParamStore, g: &TAGraph) -> Result<Embeddings> {
        self.embed_masked(store, &MaskedGraph::unmasked(g))
    }

    pub fn embed_masked(&self, store: &ParamStore, g: &MaskedGraph) -> Result<Embeddings> {
        let enc = self.encoder.encode(store, g, false, 0)?;
        let outcome = self.bank.quantize(store, &enc.node_hidden, self.pipeline.top_k)?;
        Ok(Embeddings {
            hidden: enc.node_hidden,
            quantized: outcome.zq.clone(),
            outcome,
        })
    }

    /// Every trainable tensor, in registration order.
    pub fn trainable_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, _, p)| p.trainable).map(|(id, _, _)| id).collect()
    }
}

impl MocModel {
    pub fn init(cfg: &TrainConfig, input_dim: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::init(cfg, input_dim, &mut store)?;
        Ok(MocModel {
            cfg: cfg.clone(),
            input_dim,
            net,
            store,
        })
    }

    pub fn embed(&self, g: &TAGraph) -> Result<Embeddings> {
        self.net.embed(&self.store, g)
    }

    /// All code vectors of the bank, `(M·K) x d`.
    pub fn codes(&self) -> &Tensor {
        self.store.value(self.net.bank.codes)
    }

    /// Eval-mode loss over `graphs` with a fixed mask seed; gradients are
    /// discarded.
    pub fn eval_loss(&self, graphs: &[&TAGraph], seed: u64) -> Result<(f64, LossParts)> {
        let batch = Batch::new(graphs, &self.cfg, seed)?;
        let mut scratch = self.store.clone();
        let r = self.net.forward_backward(&mut scratch, &batch, false, seed)?;
        Ok((r.total, r.parts))
    }
}
