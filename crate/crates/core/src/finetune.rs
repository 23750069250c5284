//! Downstream heads on frozen quantized embeddings: the prototype + linear
//! classifier and episodic few-/zero-shot evaluation.

use crate::data::{seeded_stream, TAGraph};
use crate::error::{Error, Result};
use crate::model::MocModel;
use crate::optim::{AdamWConfig, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, normalize_rows, normalize_rows_backward, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Fine-tuning settings: loss weights, fusion parameter and optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lambda_proto: f64,
    pub lambda_lin: f64,
    /// Weight of the linear head at inference; `1 - t` goes to prototypes.
    pub t: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda_proto: 1.0,
            lambda_lin: 1.0,
            t: 0.5,
            lr: 1e-2,
            weight_decay: 1e-5,
            epochs: 200,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(Error::Config { key: key.into(), detail });
        if !(0.0..=1.0).contains(&self.t) {
            return bad("t", format!("must lie in [0, 1], got {}", self.t));
        }
        for (k, v) in [("lambda_proto", self.lambda_proto), ("lambda_lin", self.lambda_lin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, format!("must be finite and non-negative, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Prototype classifier fused with a linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHead {
    /// One unit-norm row per class.
    pub prototypes: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
    pub t: f64,
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.rows() as f64;
    let mut g = softmax_rows(logits);
    let mut value = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        value -= g.get(r, y).max(1e-300).ln() / n;
        g.set(r, y, g.get(r, y) - 1.0);
    }
    g.scale_in_place(1.0 / n);
    (value, g)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-class mean rows of `x`; fails naming the first class with no rows.
pub fn class_means(x: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    if labels.len() != x.rows() {
        return Err(Error::arg(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let mut sums = Tensor::zeros(num_classes, x.cols());
    let mut counts = vec![0usize; num_classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::arg(format!("label {y} outside [0, {num_classes})")));
        }
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(x.row(r)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Validation(format!("class {c} has no training examples")));
    }
    for (c, &cnt) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|v| *v /= cnt as f64);
    }
    Ok(sums)
}

impl FinetuneHead {
    /// Prototypes are normalized on construction.
    pub fn new(prototypes: &Tensor, weight: Tensor, bias: Tensor, t: f64) -> Result<Self> {
        let (c, d) = prototypes.shape();
        if weight.shape() != (d, c) || bias.shape() != (1, c) {
            return Err(Error::shape(
                "finetune head",
                format!("{c} prototypes of dim {d} vs weight {:?} and bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(FinetuneHead {
            prototypes: normalize_rows(prototypes).0,
            weight,
            bias,
            t,
        })
    }

    /// Prototype-only head (`t = 0`, zero linear part).
    pub fn prototype_only(prototypes: &Tensor) -> Self {
        let (c, d) = prototypes.shape();
        Self::new(prototypes, Tensor::zeros(d, c), Tensor::zeros(1, c), 0.0).unwrap()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    /// Cosine scores against the prototypes (temperature 1).
    pub fn proto_scores(&self, x: &Tensor) -> Result<Tensor> {
        matmul_nt(&normalize_rows(x).0, &self.prototypes)
    }

    pub fn linear_scores(&self, x: &Tensor) -> Result<Tensor> {
        matmul(x, &self.weight)?.add_row_broadcast(&self.bias)
    }

    /// `t · softmax(linear) + (1 − t) · softmax(proto)`. The endpoints skip the
    /// unused branch entirely.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        if self.t == 0.0 {
            return Ok(softmax_rows(&self.proto_scores(x)?));
        }
        if self.t == 1.0 {
            return Ok(softmax_rows(&self.linear_scores(x)?));
        }
        let p = softmax_rows(&self.proto_scores(x)?).scale(1.0 - self.t);
        let l = softmax_rows(&self.linear_scores(x)?).scale(self.t);
        p.add(&l)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.probabilities(x)?;
        Ok(p.iter_rows().map(argmax).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::arg("accuracy over an empty set"));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    /// Initializes prototypes at the class means of `x` and trains both the
    /// prototypes and the linear head on
    /// `λ_proto · CE(proto) + λ_lin · CE(linear)`. Returns the head and the
    /// per-epoch training loss.
    pub fn fit(x: &Tensor, labels: &[usize], num_classes: usize, cfg: &FinetuneConfig) -> Result<(Self, Vec<f64>)> {
        cfg.validate()?;
        let means = class_means(x, labels, num_classes)?;
        let d = x.cols();
        let mut store = ParamStore::new();
        let proto = store.add("prototypes", normalize_rows(&means).0)?;
        let weight = store.add("weight", Tensor::zeros(d, num_classes))?;
        let bias = store.add("bias", Tensor::zeros(1, num_classes))?;
        let adam = AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let (xn, _) = normalize_rows(x);
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let p = store.value(proto).clone();
            let (pn, p_norms) = normalize_rows(&p);
            let (lp, gp) = cross_entropy(&matmul_nt(&xn, &pn)?, labels);
            let g_pn = matmul_tn(&gp, &xn)?;
            let g_p = normalize_rows_backward(&p, &pn, &p_norms, &g_pn);
            store.accumulate(proto, &g_p.scale(cfg.lambda_proto))?;

            let logits = matmul(x, store.value(weight))?.add_row_broadcast(store.value(bias))?;
            let (ll, gl) = cross_entropy(&logits, labels);
            store.accumulate(weight, &matmul_tn(x, &gl)?.scale(cfg.lambda_lin))?;
            store.accumulate(bias, &gl.sum_rows().scale(cfg.lambda_lin))?;

            losses.push(cfg.lambda_proto * lp + cfg.lambda_lin * ll);
            store.adaptive_moment_step(&adam)?;
            let renorm = normalize_rows(store.value(proto)).0;
            *store.value_mut(proto) = renorm;
        }
        let head = FinetuneHead::new(store.value(proto), store.value(weight).clone(), store.value(bias).clone(), cfg.t)?;
        Ok((head, losses))
    }
}

/// Node index split for fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded random split with `train_fraction` of the nodes for training.
    pub fn random(num_nodes: usize, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::arg(format!("train fraction must lie in (0, 1), got {train_fraction}")));
        }
        let mut idx: Vec<usize> = (0..num_nodes).collect();
        idx.shuffle(&mut seeded_stream(seed, 71));
        let cut = ((num_nodes as f64 * train_fraction).round() as usize).clamp(1, num_nodes.saturating_sub(1));
        let test = idx.split_off(cut);
        Ok(Splits { train: idx, test })
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub head: FinetuneHead,
    pub test_accuracy: f64,
    pub train_losses: Vec<f64>,
}

fn node_labels(g: &TAGraph) -> Result<&[usize]> {
    g.node_labels().ok_or_else(|| Error::arg("graph carries no node labels"))
}

/// Fits a head on the frozen model's quantized embeddings of the train
/// split and scores the test split.
pub fn finetune(model: &MocModel, g: &TAGraph, splits: &Splits, cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    let labels = node_labels(g)?;
    let z = model.embed(g)?.quantized;
    let pick = |idx: &[usize]| -> (Tensor, Vec<usize>) { (z.select_rows(idx), idx.iter().map(|&i| labels[i]).collect()) };
    let (x_train, y_train) = pick(&splits.train);
    let (x_test, y_test) = pick(&splits.test);
    let (head, train_losses) = FinetuneHead::fit(&x_train, &y_train, g.num_classes(), cfg)?;
    let test_accuracy = head.accuracy(&x_test, &y_test)?;
    Ok(FinetuneResult {
        head,
        test_accuracy,
        train_losses,
    })
}

/// One sampled `n_way`-`k_shot` task over labeled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Original class ids, in episode order.
    pub classes: Vec<usize>,
    /// Support row indices per episode class.
    pub supports: Vec<Vec<usize>>,
    /// `(row, episode class)` query pairs.
    pub queries: Vec<(usize, usize)>,
}

/// Samples `n_way` classes among those with more than `k_shot` rows, `k_shot`
/// supports each, and up to `query_size` queries from the remaining rows of
/// the chosen classes.
pub fn sample_episode(labels: &[usize], n_way: usize, k_shot: usize, query_size: usize, seed: u64) -> Result<Episode> {
    if n_way < 2 || query_size == 0 {
        return Err(Error::arg("episodes need n_way >= 2 and a non-empty query set"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut eligible: Vec<usize> = (0..num_classes).filter(|&c| by_class[c].len() > k_shot).collect();
    if eligible.len() < n_way {
        return Err(Error::Validation(format!(
            "only {} classes have more than {k_shot} labeled nodes, need {n_way}",
            eligible.len()
        )));
    }
    let mut rng = seeded_stream(seed, 81);
    eligible.shuffle(&mut rng);
    let mut classes: Vec<usize> = eligible[..n_way].to_vec();
    classes.sort_unstable();
    let mut supports = Vec::with_capacity(n_way);
    let mut pool = Vec::new();
    for (e, &c) in classes.iter().enumerate() {
        let mut rows = by_class[c].clone();
        rows.shuffle(&mut rng);
        let rest = rows.split_off(k_shot);
        supports.push(rows);
        pool.extend(rest.into_iter().map(|r| (r, e)));
    }
    pool.shuffle(&mut rng);
    pool.truncate(query_size);
    Ok(Episode {
        classes,
        supports,
        queries: pool,
    })
}

/// Prototype-only accuracy of `episode` over embedding rows `z`.
pub fn episode_accuracy(z: &Tensor, episode: &Episode) -> Result<f64> {
    let protos: Vec<Tensor> = episode
        .supports
        .iter()
        .map(|rows| {
            let sel = z.select_rows(rows);
            let mut m = sel.sum_rows();
            m.scale_in_place(1.0 / rows.len().max(1) as f64);
            m
        })
        .collect();
    let refs: Vec<&Tensor> = protos.iter().collect();
    let head = FinetuneHead::prototype_only(&Tensor::vstack(&refs)?);
    let rows: Vec<usize> = episode.queries.iter().map(|q| q.0).collect();
    let truth: Vec<usize> = episode.queries.iter().map(|q| q.1).collect();
    head.accuracy(&z.select_rows(&rows), &truth)
}

/// Few-shot accuracy on precomputed embeddings.
pub fn few_shot_on_embeddings(
    z: &Tensor,
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    query_size: usize,
    seed: u64,
) -> Result<f64> {
    if k_shot == 0 {
        return Err(Error::arg("few-shot episodes need k_shot >= 1; use zero_shot_episode"));
    }
    episode_accuracy(z, &sample_episode(labels, n_way, k_shot, query_size, seed)?)
}

/// One prototype-only episode on the frozen model's quantized embeddings.
pub fn few_shot_episode(
    model: &MocModel,
    g: &TAGraph,
    n_way: usize,
    k_shot: usize,
    query_size: usize,
    seed: u64,
) -> Result<f64> {
    let z = model.embed(g)?.quantized;
    few_shot_on_embeddings(&z, node_labels(g)?, n_way, k_shot, query_size, seed)
}

/// Mean accuracy over `episodes` episodes with seeds `seed, seed+1, ...`;
/// the graph is embedded once.
pub fn mean_few_shot_accuracy(
    model: &MocModel,
    g: &TAGraph,
    n_way: usize,
    k_shot: usize,
    query_size: usize,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let z = model.embed(g)?.quantized;
    let labels = node_labels(g)?;
    let mut total = 0.0;
    for e in 0..episodes {
        total += few_shot_on_embeddings(&z, labels, n_way, k_shot, query_size, seed + e as u64)?;
    }
    Ok(total / episodes.max(1) as f64)
}

/// Zero-shot episode: class prototypes come from `descriptors` (one feature
/// row per class) passed through the frozen backbone as isolated nodes.
pub fn zero_shot_episode(
    model: &MocModel,
    g: &TAGraph,
    descriptors: &Tensor,
    n_way: usize,
    query_size: usize,
    seed: u64,
) -> Result<f64> {
    let labels = node_labels(g)?;
    if descriptors.rows() < g.num_classes() {
        return Err(Error::arg(format!(
            "{} descriptors for {} classes",
            descriptors.rows(),
            g.num_classes()
        )));
    }
    let c = descriptors.rows();
    let desc_graph = TAGraph::new(
        c,
        Vec::new(),
        descriptors.clone(),
        Tensor::zeros(0, g.edge_features().cols()),
        None,
        g.domain_id(),
        None,
    )?;
    let protos_all = model.embed(&desc_graph)?.quantized;
    let z = model.embed(g)?.quantized;
    let ep = sample_episode(labels, n_way, 0, query_size, seed)?;
    let head = FinetuneHead::prototype_only(&protos_all.select_rows(&ep.classes));
    let rows: Vec<usize> = ep.queries.iter().map(|q| q.0).collect();
    let truth: Vec<usize> = ep.queries.iter().map(|q| q.1).collect();
    head.accuracy(&z.select_rows(&rows), &truth)
}
