//! Finite-difference suites. Each returns labelled results so callers can
//! assert individually or aggregate.

use super::random;
use mocgvq::config::TrainConfig;
use mocgvq::data::{apply_masks, generate_synthetic_domain, synthetic_corpus, MaskedGraph, SyntheticDomain, TAGraph};
use mocgvq::encoder::{EncoderConfig, FusionEncoder};
use mocgvq::gradcheck::{all_coords, check_store_coords, check_tensor, GradCheck};
use mocgvq::model::{Batch, MocModel};
use mocgvq::objectives::{
    commitment, feature_reconstruction, importance_balance, load_balance, topology_reconstruction,
    triple_contrastive, DecoderHeads, SelfTerms,
};
use mocgvq::optim::ParamStore;
use mocgvq::quantizer::{ste_backward, CodebookBank};
use mocgvq::tensor::{matmul, matmul_backward, normalize_rows, normalize_rows_backward, relu, relu_backward, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

pub const STEP: f64 = 1e-5;
/// Per-operation tolerance.
pub const OP_TOL: f64 = 1e-4;
/// Whole-pipeline tolerance.
pub const END_TO_END_TOL: f64 = 1e-3;

pub type Checks = Vec<(String, GradCheck)>;

fn weighted_sum(a: &Tensor, w: &Tensor) -> f64 {
    a.hadamard(w).unwrap().sum()
}

pub fn with_edge_features(g: &TAGraph, ef: Tensor) -> TAGraph {
    TAGraph::new(
        g.num_nodes(),
        g.edges().to_vec(),
        g.node_features().clone(),
        ef,
        g.node_labels().map(|l| l.to_vec()),
        g.domain_id(),
        None,
    )
    .unwrap()
}

pub fn tensor_ops() -> Checks {
    let mut rng = super::rng(1);
    let a = random(3, 4, &mut rng);
    let b = random(4, 2, &mut rng);
    let w = random(3, 2, &mut rng);
    let (ga, gb) = matmul_backward(&a, &b, &w).unwrap();
    let mut out = vec![
        ("matmul lhs".into(), check_tensor("a", &a, &ga, STEP, |x| weighted_sum(&matmul(x, &b).unwrap(), &w))),
        ("matmul rhs".into(), check_tensor("b", &b, &gb, STEP, |x| weighted_sum(&matmul(&a, x).unwrap(), &w))),
    ];
    // keep inputs away from the kink
    let x = random(4, 3, &mut rng).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let w = random(4, 3, &mut rng);
    let g = relu_backward(&x, &w).unwrap();
    out.push(("relu".into(), check_tensor("x", &x, &g, STEP, |x| weighted_sum(&relu(x), &w))));
    let (unit, norms) = normalize_rows(&x);
    let g = normalize_rows_backward(&x, &unit, &norms, &w);
    out.push((
        "row normalization".into(),
        check_tensor("x", &x, &g, STEP, |x| weighted_sum(&normalize_rows(x).0, &w)),
    ));
    out
}

pub fn encoder(training: bool, batch_norm: bool, fusion: bool) -> Checks {
    let mut rng = super::rng(100);
    let g = generate_synthetic_domain(0, 9, 3.0, 4, 2, 4).unwrap();
    // non-constant edge features
    let g = with_edge_features(&g, random(g.num_edges(), 4, &mut rng));
    let masked = apply_masks(&g, 0.2, 0.2, 3).unwrap();
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        input_dim: 4,
        hidden_dim: 5,
        num_layers: 2,
        dropout: if training { 0.2 } else { 0.0 },
        batch_norm,
        edge_fusion: fusion,
    };
    let enc = FusionEncoder::init(cfg, &mut store, "enc", 9).unwrap();
    if batch_norm && !training {
        for lp in enc.layers() {
            *store.value_mut(lp.bn_running_mean) = random(1, 5, &mut rng);
            *store.value_mut(lp.bn_running_var) = random(1, 5, &mut rng).map(|v| v.abs() + 0.5);
        }
    }
    let r = enc.encode(&store, &masked, training, 17).unwrap();
    let wn = random(r.node_hidden.rows(), 5, &mut rng);
    let we = random(r.edge_hidden.rows(), 5, &mut rng);
    let objective = |s: &ParamStore, m: &MaskedGraph| {
        let r = enc.encode(s, m, training, 17).unwrap();
        weighted_sum(&r.node_hidden, &wn) + weighted_sum(&r.edge_hidden, &we)
    };
    let input_grads = enc.encode_backward(&mut store, &r, &wn, Some(&we)).unwrap();
    let analytic = store.clone();
    let ids: Vec<_> = store.ids().filter(|&id| store.param(id).trainable).collect();
    let coords = all_coords(&store, &ids);
    let mut out = Checks::new();
    out.push((
        "encoder params".into(),
        check_store_coords(&mut store, &analytic, &coords, STEP, |s| objective(s, &masked)),
    ));
    out.push((
        "encoder node input".into(),
        check_tensor("x", &masked.corrupted_features, &input_grads.node_features, STEP, |x| {
            let mut m = masked.clone();
            m.corrupted_features = x.clone();
            objective(&store, &m)
        }),
    ));
    let kept = masked.kept_edge_features();
    out.push((
        "encoder edge input".into(),
        check_tensor("e", &kept, &input_grads.edge_features, STEP, |x| {
            let mut ef = masked.base.edge_features().clone();
            for (row, &id) in masked.kept_edge_ids.iter().enumerate() {
                ef.row_mut(id).copy_from_slice(x.row(row));
            }
            let mut m = masked.clone();
            m.base = with_edge_features(&masked.base, ef);
            objective(&store, &m)
        }),
    ));
    out
}

pub fn gating() -> Checks {
    let mut rng = super::rng(3);
    let mut store = ParamStore::new();
    let bank = CodebookBank::init(&mut store, "q", 3, 4, 5, 7).unwrap();
    let h = random(6, 5, &mut rng);
    let w = random(6, 3, &mut rng);
    let (_, cache) = bank.gate(&store, &h).unwrap();
    let gh = bank.gate_backward(&mut store, &cache, &w).unwrap();
    let analytic = store.clone();
    let ids: Vec<_> = bank.gates.iter().flat_map(|g| [g.w1, g.b1, g.w2, g.b2]).collect();
    let coords = all_coords(&store, &ids);
    vec![
        (
            "gate params".into(),
            check_store_coords(&mut store, &analytic, &coords, STEP, |s| {
                weighted_sum(&bank.gate(s, &h).unwrap().0, &w)
            }),
        ),
        (
            "gate input".into(),
            check_tensor("h", &h, &gh, STEP, |x| weighted_sum(&bank.gate(&store, x).unwrap().0, &w)),
        ),
    ]
}

/// Mixture-weight path with routing and code choice frozen.
pub fn quantizer_weights() -> Checks {
    let mut rng = super::rng(4);
    let mut store = ParamStore::new();
    let bank = CodebookBank::init(&mut store, "q", 4, 5, 3, 7).unwrap();
    let h = random(7, 3, &mut rng);
    let out = bank.quantize(&store, &h, 2).unwrap();
    let w = random(7, 3, &mut rng);
    let codes = store.value(bank.codes).clone();
    let grads = ste_backward(&out, &codes, &w).unwrap();
    vec![
        (
            "mixture scores".into(),
            check_tensor("s", &out.scores, &grads.scores, STEP, |s| {
                weighted_sum(&out.frozen_forward(&h, s, &codes).unwrap(), &w)
            }),
        ),
        (
            "mixture codes".into(),
            check_tensor("c", &codes, &grads.codes, STEP, |c| {
                weighted_sum(&out.frozen_forward(&h, &out.scores, c).unwrap(), &w)
            }),
        ),
        (
            "straight-through input".into(),
            check_tensor("h", &h, &grads.h, STEP, |x| {
                weighted_sum(&out.frozen_forward(x, &out.scores, &codes).unwrap(), &w)
            }),
        ),
    ]
}

pub fn reconstruction_losses() -> Checks {
    let mut rng = super::rng(5);
    let mut store = ParamStore::new();
    let heads = DecoderHeads::init(&mut store, "dec", 4, 3, 1).unwrap();
    let zq = random(6, 4, &mut rng);
    let x = random(6, 3, &mut rng);
    let mut out = Checks::new();
    let (_, gz, hg) = heads.loss_feat(&store, &zq, &x).unwrap();
    out.push(("feature loss input".into(), check_tensor("z", &zq, &gz, STEP, |z| heads.loss_feat(&store, z, &x).unwrap().0)));
    let bias = store.value(heads.feature.bias).clone();
    out.push((
        "feature head".into(),
        check_tensor("w", store.value(heads.feature.weight), &hg.weight, STEP, |w| {
            feature_reconstruction(&matmul(&zq, w).unwrap().add_row_broadcast(&bias).unwrap(), &x).unwrap().0
        }),
    ));
    let pos = vec![(0, 1), (1, 2), (3, 4)];
    let neg = vec![(0, 5), (2, 4), (1, 3)];
    let (_, gz, hg) = heads.loss_topo(&store, &zq, &pos, &neg).unwrap();
    out.push((
        "topology loss input".into(),
        check_tensor("z", &zq, &gz, STEP, |z| heads.loss_topo(&store, z, &pos, &neg).unwrap().0),
    ));
    let bias = store.value(heads.topology.bias).clone();
    out.push((
        "topology head".into(),
        check_tensor("w", store.value(heads.topology.weight), &hg.weight, STEP, |w| {
            let zt = matmul(&zq, w).unwrap().add_row_broadcast(&bias).unwrap();
            topology_reconstruction(&zt, &pos, &neg).unwrap().0
        }),
    ));
    out
}

pub fn alignment_and_load_losses() -> Checks {
    let mut rng = super::rng(6);
    let h = random(5, 4, &mut rng);
    let z = random(5, 4, &mut rng);
    let mut out = Checks::new();
    for mode in [SelfTerms::Include, SelfTerms::Exclude] {
        let (_, gh, gz) = triple_contrastive(&h, &z, 0.5, mode).unwrap();
        out.push((
            format!("contrastive h ({mode:?})"),
            check_tensor("h", &h, &gh, STEP, |x| triple_contrastive(x, &z, 0.5, mode).unwrap().0),
        ));
        out.push((
            format!("contrastive z ({mode:?})"),
            check_tensor("z", &z, &gz, STEP, |x| triple_contrastive(&h, x, 0.5, mode).unwrap().0),
        ));
    }
    let s = super::random_in(6, 3, 0.1, 1.1, &mut rng);
    let labels = [0, 1, 2, 1, 0, 2];
    let (_, g) = load_balance(&s, &labels).unwrap();
    out.push(("load".into(), check_tensor("s", &s, &g, STEP, |x| load_balance(x, &labels).unwrap().0)));
    let (_, g) = importance_balance(&s).unwrap();
    out.push(("importance".into(), check_tensor("s", &s, &g, STEP, |x| importance_balance(x).unwrap().0)));
    let (_, g) = commitment(&h, &z).unwrap();
    out.push(("commitment".into(), check_tensor("h", &h, &g, STEP, |x| commitment(x, &z).unwrap().0)));
    out
}

/// Small two-domain model with dropout off, so eval-mode passes are exact.
pub fn tiny_model(cfg_edit: impl FnOnce(&mut TrainConfig)) -> (mocgvq::data::DomainCorpus, MocModel) {
    let tmpl = SyntheticDomain::new(0, 14, 3.0, 6, 2);
    let (corpus, _) = synthetic_corpus(&tmpl, 2, 11).unwrap();
    let mut cfg = TrainConfig {
        hidden_dim: 6,
        codebook_size: 5,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    cfg_edit(&mut cfg);
    let model = MocModel::init(&cfg, corpus.feature_dim()).unwrap();
    (corpus, model)
}

/// Full-pipeline gradient on 10 random trainable coordinates against
/// central differences of the frozen-routing total loss. The loss weights
/// are set to 1 so every term is visible at the checked precision.
pub fn end_to_end(seed: u64, cfg_edit: impl FnOnce(&mut TrainConfig)) -> GradCheck {
    let (corpus, model) = tiny_model(|c| {
        c.lambda1 = 1.0;
        c.lambda2 = 1.0;
        c.lambda3 = 1.0;
        c.lambda4 = 1.0;
        cfg_edit(c);
    });
    let mut rng = super::rng(seed);
    let graphs: Vec<&TAGraph> = corpus.graphs().iter().collect();
    let batch = Batch::new(&graphs, &model.cfg, seed).unwrap();
    let mut store = model.store.clone();
    let result = model.net.forward_backward(&mut store, &batch, false, seed).unwrap();
    let analytic = store.clone();
    let ids = model.net.trainable_ids(&store);
    let mut coords = all_coords(&store, &ids);
    coords.shuffle(&mut rng);
    coords.truncate(10);
    // one coordinate always from the codes and one from a gate
    let code_id = model.net.bank.codes;
    coords.push((code_id, rng.gen_range(0..store.value(code_id).len())));
    let gate_id = model.net.bank.gates[0].w1;
    coords.push((gate_id, rng.gen_range(0..store.value(gate_id).len())));
    check_store_coords(&mut store, &analytic, &coords, STEP, |s| {
        model.net.frozen_routing_loss(s, &batch, &result.outcome).unwrap()
    })
}

/// Every per-operation suite.
pub fn all_operations() -> Checks {
    let mut out = tensor_ops();
    for (training, bn, fusion) in [(false, false, true), (false, true, true), (true, true, true), (true, true, false)] {
        out.extend(
            encoder(training, bn, fusion)
                .into_iter()
                .map(|(n, c)| (format!("{n} (train={training} bn={bn} fusion={fusion})"), c)),
        );
    }
    out.extend(gating());
    out.extend(quantizer_weights());
    out.extend(reconstruction_losses());
    out.extend(alignment_and_load_losses());
    out
}
