//! Exit criteria. Each test prints one `[PASS]`/`[FAIL]` line (visible with
//! `--nocapture`) and then asserts the criterion at its pinned tolerance.

mod common;

use common::grad::{all_operations, end_to_end, END_TO_END_TOL, OP_TOL};
use common::runs::{ablation_grid, desk_sanity, uniformity_step, ABLATIONS};
use common::*;
use mocgvq::checkpoint;
use mocgvq::config::TrainConfig;
use mocgvq::data::{read_graph_file, synthetic_corpus, write_graph_file, SyntheticDomain};
use mocgvq::diagnostics::{domain_kl_heatmap, landscape_1d, utilization_entropy};
use mocgvq::finetune::{class_means, few_shot_on_embeddings, FinetuneConfig, FinetuneHead};
use mocgvq::model::MocModel;
use mocgvq::objectives::{feature_reconstruction, load_balance, topology_reconstruction, triple_contrastive, SelfTerms};
use mocgvq::optim::ParamStore;
use mocgvq::quantizer::{quantize_with_scores, vq_lookup, CodebookBank};
use mocgvq::report::{diagnose, file_stem};
use mocgvq::tensor::{matmul, Tensor};
use rand::Rng;
use std::process::Command;
use std::time::{Duration, Instant};

const EXACT: f64 = 1e-9;

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let ops = all_operations();
    let worst_op = ops.iter().map(|(_, c)| c.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = ops.iter().filter(|(_, c)| !c.passes(OP_TOL)).map(|(n, _)| n.as_str()).collect();
    let mut e2e_worst = 0.0f64;
    let mut e2e_ok = true;
    for seed in 0..3 {
        let c = end_to_end(seed, |_| {});
        e2e_ok &= c.passes(END_TO_END_TOL);
        e2e_worst = e2e_worst.max(c.max_rel_err);
    }
    let elapsed = start.elapsed();
    let ok = failing.is_empty() && e2e_ok && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient integrity",
        ok,
        &format!(
            "{} op checks worst rel {worst_op:.2e} (< {OP_TOL:e}), end-to-end worst {e2e_worst:.2e} (< {END_TO_END_TOL:e}), {elapsed:.1?}; failing {failing:?}",
            ops.len()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = rng(2);
    let mut lookup_mismatch = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let book = random(k, d, &mut rng);
        let z = random(1, d, &mut rng);
        let (i, code) = vq_lookup(z.row(0), &book).unwrap();
        if i != exhaustive_nearest(z.row(0), &book) || code != book.row(i) {
            lookup_mismatch += 1;
        }
    }

    let mut quantize_err = 0.0f64;
    for _ in 0..50 {
        let (m, k, top) = (4, 8, rng.gen_range(1..=4));
        let h = random(12, 4, &mut rng);
        let codes = random(m * k, 4, &mut rng);
        let scores = random_in(12, m, 0.05, 2.0, &mut rng);
        let out = quantize_with_scores(&h, &scores, &codes, m, k, top).unwrap();
        quantize_err = quantize_err.max(out.zq.max_abs_diff(&rederive_quantized(&h, &scores, &codes, m, k, top)));
    }

    let mut con_err = 0.0f64;
    let mut load_err = 0.0f64;
    for n in [3, 5, 9] {
        let h = unit_rows(&random(n, 4, &mut rng));
        let z = unit_rows(&random(n, 4, &mut rng));
        for tau in [0.5, 1.0, 0.2] {
            let v = triple_contrastive(&h, &z, tau, SelfTerms::Include).unwrap().0;
            con_err = con_err.max((v - naive_contrastive(&h, &z, tau)).abs());
        }
        let s = random_in(n, 3, 0.01, 3.0, &mut rng);
        let dom: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        load_err = load_err.max((load_balance(&s, &dom).unwrap().0 - naive_load(&s, &dom)).abs());
    }
    let elapsed = start.elapsed();
    let ok = lookup_mismatch == 0
        && quantize_err < EXACT
        && con_err < EXACT
        && load_err < EXACT
        && elapsed < Duration::from_secs(30);
    report(
        2,
        "oracle equivalence",
        ok,
        &format!(
            "lookup mismatches {lookup_mismatch}/1000, quantize {quantize_err:.1e}, contrastive {con_err:.1e}, load {load_err:.1e}, {elapsed:.1?}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_closed_form_losses() {
    let u = Tensor::row_vector(&[0.6, 0.8]);
    let con = [0.1, 0.5, 2.0].map(|tau| triple_contrastive(&u, &u, tau, SelfTerms::Include).unwrap().0);
    let con_err = con.iter().map(|v| (v - 3f64.ln()).abs()).fold(0.0, f64::max);

    let uniform = Tensor::filled(5, 2, 0.7);
    let load = load_balance(&uniform, &[0, 1, 1, 0, 1]).unwrap().0;
    let load_err = (load - 2f64.ln()).abs();

    let zt = Tensor::zeros(3, 4);
    let topo = topology_reconstruction(&zt, &[(0, 1)], &[(0, 2)]).unwrap().0;
    let topo_err = (topo - 2.0 * 2f64.ln()).abs();

    let x = random(6, 5, &mut rng(3));
    let recon = feature_reconstruction(&x, &x).unwrap().0;

    let ok = con_err < EXACT && load_err < EXACT && topo_err < EXACT && recon.abs() < EXACT;
    report(
        3,
        "closed-form losses",
        ok,
        &format!("ln3 {con_err:.1e}, ln2 {load_err:.1e}, 2ln2 {topo_err:.1e}, identity reconstruction {recon:.1e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_04_reduction_and_capacity() {
    let mut rng = rng(4);
    // reduction on the bank directly
    let mut store = ParamStore::new();
    let bank = CodebookBank::init(&mut store, "q", 1, 8, 4, 5).unwrap();
    let h = random(1000, 4, &mut rng);
    let out = bank.quantize(&store, &h, 1).unwrap();
    let codes = store.value(bank.codes);
    let mut mismatches = (0..1000)
        .filter(|&r| {
            let i = exhaustive_nearest(h.row(r), codes);
            out.code_index[r] != [i] || out.zq.row(r) != codes.row(i)
        })
        .count();

    // and through a model built with the single-codebook switch
    let (corpus, _) = synthetic_corpus(&SyntheticDomain::new(0, 60, 4.0, 8, 3), 2, 9).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.ablation.single_codebook = true;
    let model = MocModel::init(&cfg, corpus.feature_dim()).unwrap();
    let mut pipeline_nodes = 0;
    for g in corpus.graphs() {
        let e = model.embed(g).unwrap();
        for r in 0..e.hidden.rows() {
            let i = exhaustive_nearest(e.hidden.row(r), model.codes());
            if e.outcome.code_index[r] != [i] || e.quantized.row(r) != model.codes().row(i) {
                mismatches += 1;
            }
            pipeline_nodes += 1;
        }
    }

    // entropy never exceeds the ceiling
    let (m, k) = (4usize, 8usize);
    let ceiling = ((m * k) as f64).ln();
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..200);
        let acts: Vec<(usize, usize)> = (0..n).map(|_| (rng.gen_range(0..m), rng.gen_range(0..k))).collect();
        worst_excess = worst_excess.max(utilization_entropy(acts) - ceiling);
    }

    // probe: every code fed back as input with its own codebook gated on
    let codes = random(m * k, 6, &mut rng);
    let mut scores = Tensor::filled(m * k, m, 0.01);
    for r in 0..m * k {
        scores.set(r, r / k, 1.0);
    }
    let probe = quantize_with_scores(&codes, &scores, &codes, m, k, 1).unwrap();
    let mut distinct: Vec<(usize, usize)> = probe.activations().collect();
    let probe_entropy = utilization_entropy(distinct.clone());
    distinct.sort_unstable();
    distinct.dedup();

    let ok = mismatches == 0
        && worst_excess <= 1e-12
        && distinct.len() == m * k
        && (probe_entropy - ceiling).abs() < EXACT
        && probe_entropy > (k as f64).ln();
    report(
        4,
        "reduction and capacity",
        ok,
        &format!(
            "mismatches {mismatches} over 1000 bank inputs + {pipeline_nodes} pipeline nodes, max entropy excess {worst_excess:.2e}, probe {} outcomes entropy {probe_entropy:.6} vs ln(MK) {ceiling:.6}",
            distinct.len()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_contrastive_uniformity_direction() {
    let results: Vec<_> = (0..20).map(|s| uniformity_step(s, 16, 8, 1e-2)).collect();
    let h_up = results.iter().filter(|r| r.h.1 > r.h.0).count();
    let z_up = results.iter().filter(|r| r.z.1 > r.z.0).count();
    let min_gain = results
        .iter()
        .map(|r| (r.h.1 - r.h.0).min(r.z.1 - r.z.0))
        .fold(f64::INFINITY, f64::min);
    let ok = h_up == 20 && z_up == 20;
    report(
        5,
        "contrastive uniformity direction",
        ok,
        &format!("h increased {h_up}/20, z increased {z_up}/20, smallest gain {min_gain:.3e} rad"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_ablation_directions() {
    let start = Instant::now();
    let grid = ablation_grid();
    let wins = |idx: usize, metric: fn(&common::runs::RunMetrics) -> f64| {
        grid.iter().filter(|(base, abl)| metric(base) > metric(&abl[idx])).count()
    };
    let acc = |m: &common::runs::RunMetrics| m.accuracy;
    let mut comparisons = Vec::new();
    for (i, name) in ABLATIONS.iter().enumerate().take(4) {
        comparisons.push((format!("accuracy > {name}"), wins(i, acc)));
    }
    comparisons.push(("code dispersion > commitment_loss".into(), wins(2, |m| m.code_dispersion)));
    comparisons.push(("utilization entropy > no_load_loss".into(), wins(4, |m| m.utilization)));
    let elapsed = start.elapsed();
    for (base, abl) in &grid {
        let cell = |m: &common::runs::RunMetrics| format!("{:.3}/{:.4}/{:.3}", m.accuracy, m.code_dispersion, m.utilization);
        println!(
            "  default {} | {}",
            cell(base),
            ABLATIONS.iter().zip(abl).map(|(n, m)| format!("{n} {}", cell(m))).collect::<Vec<_>>().join(" | ")
        );
    }
    let ok = comparisons.iter().all(|(_, w)| *w >= 4) && elapsed < Duration::from_secs(600);
    let summary: Vec<String> = comparisons.iter().map(|(n, w)| format!("{n} {w}/5")).collect();
    report(6, "ablation directions", ok, &format!("{}; {elapsed:.1?}", summary.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_07_training_sanity() {
    let r = desk_sanity();
    let ratio = r.final_loss / r.initial_loss;
    let ok = ratio < 0.5 && r.all_finite && r.repeat_identical && r.resume_identical;
    report(
        7,
        "training sanity",
        ok,
        &format!(
            "{} steps, eval loss {:.4} -> {:.4} (ratio {ratio:.3} < 0.5), finite {}, repeat identical {}, resume identical {}",
            r.steps, r.initial_loss, r.final_loss, r.all_finite, r.repeat_identical, r.resume_identical
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_diagnostics_correctness() {
    let mut rng = rng(8);
    // duplicated domains
    let x = random(30, 4, &mut rng);
    let dup = Tensor::vstack(&[&x, &x]).unwrap();
    let labels: Vec<usize> = (0..60).map(|i| i / 30).collect();
    let kl_dup = domain_kl_heatmap(&dup, &labels, 2).unwrap();
    let dup_max = [kl_dup.get(0, 1), kl_dup.get(1, 0)].iter().map(|v| v.unwrap().abs()).fold(0.0, f64::max);

    // 1-D: {-1, 1} vs {0, 2}, both unit population variance, means one apart
    let shift = Tensor::from_vec(4, 1, vec![-1.0, 1.0, 0.0, 2.0]).unwrap();
    let kl_shift = domain_kl_heatmap(&shift, &[0, 0, 1, 1], 2).unwrap().get(0, 1).unwrap();

    // PCA direction against an independent power iteration
    let rot = unit_rows(&random(5, 5, &mut rng));
    let scales = Tensor::from_vec(1, 5, vec![3.0, 1.5, 1.0, 0.5, 0.2]).unwrap();
    let mut raw = random(400, 5, &mut rng);
    for r in 0..400 {
        for (v, s) in raw.row_mut(r).iter_mut().zip(scales.row(0)) {
            *v *= s;
        }
    }
    let pts = matmul(&raw, &rot).unwrap();
    let oracle = power_iteration_oracle(&naive_covariance(&pts), 20_000);
    let dir = landscape_1d(&pts, None).unwrap().direction;
    let sign = if dir.iter().zip(&oracle).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let pca_err = dir.iter().zip(&oracle).map(|(a, b)| (a - sign * b).abs()).fold(0.0, f64::max);

    // separable domains against the duplicated control, through a model
    let (corpus, _) = synthetic_corpus(&SyntheticDomain::default(), 2, 42).unwrap();
    let model = MocModel::init(&TrainConfig::default(), corpus.feature_dim()).unwrap();
    let h0 = model.embed(&corpus.graphs()[0]).unwrap().hidden;
    let h1 = model.embed(&corpus.graphs()[1]).unwrap().hidden;
    let lab = |a: usize, b: usize| -> Vec<usize> { std::iter::repeat(0).take(a).chain(std::iter::repeat(1).take(b)).collect() };
    let sep = domain_kl_heatmap(&Tensor::vstack(&[&h0, &h1]).unwrap(), &lab(h0.rows(), h1.rows()), 2).unwrap();
    let ctl = domain_kl_heatmap(&Tensor::vstack(&[&h0, &h0]).unwrap(), &lab(h0.rows(), h0.rows()), 2).unwrap();
    let (sep_kl, ctl_kl) = (sep.get(0, 1).unwrap(), ctl.get(0, 1).unwrap());

    let ok = dup_max < EXACT && (kl_shift - 0.5).abs() < EXACT && pca_err < 1e-6 && sep_kl > ctl_kl;
    report(
        8,
        "diagnostics correctness",
        ok,
        &format!(
            "duplicated KL {dup_max:.1e}, unit-shift KL {kl_shift:.12}, PCA max deviation {pca_err:.1e}, separable KL {sep_kl:.4} > control {ctl_kl:.4}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_downstream_heads() {
    let mut rng = rng(9);
    // three classes on orthogonal axes with small jitter
    let make = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut x = random(n, 6, rng).map(|v| 0.3 * v);
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        for (r, &c) in y.iter().enumerate() {
            x.row_mut(r)[c] += 4.0;
        }
        (x, y)
    };
    let (train_x, train_y) = make(60, &mut rng);
    let (test_x, test_y) = make(90, &mut rng);
    let proto = FinetuneHead::prototype_only(&class_means(&train_x, &train_y, 3).unwrap());
    let proto_acc = proto.accuracy(&test_x, &test_y).unwrap();
    let (fused, _) = FinetuneHead::fit(&train_x, &train_y, 3, &FinetuneConfig::default()).unwrap();
    let fused_acc = fused.accuracy(&test_x, &test_y).unwrap();

    // identical class distributions
    let z = random(400, 8, &mut rng);
    let labels: Vec<usize> = (0..400).map(|_| rng.gen_range(0..2)).collect();
    let chance = (0..200).map(|s| few_shot_on_embeddings(&z, &labels, 2, 5, 20, s).unwrap()).sum::<f64>() / 200.0;

    // endpoints: predictions follow one branch and ignore the other
    let protos = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let weight = Tensor::from_rows(&[[0.0, 5.0], [5.0, 0.0]]).unwrap();
    let bias = Tensor::zeros(1, 2);
    let q = Tensor::from_rows(&[[2.0, 0.1], [0.1, 2.0]]).unwrap();
    let at = |t: f64| FinetuneHead::new(&protos, weight.clone(), bias.clone(), t).unwrap();
    let p0 = at(0.0).probabilities(&q).unwrap();
    let p1 = at(1.0).probabilities(&q).unwrap();
    let proto_only = FinetuneHead::prototype_only(&protos).probabilities(&q).unwrap();
    let linear_only = {
        let other = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        FinetuneHead::new(&other, weight.clone(), bias.clone(), 1.0).unwrap().probabilities(&q).unwrap()
    };
    let endpoints_ok = p0.max_abs_diff(&proto_only) == 0.0
        && p1.max_abs_diff(&linear_only) == 0.0
        && at(0.0).predict(&q).unwrap() == vec![0, 1]
        && at(1.0).predict(&q).unwrap() == vec![1, 0];

    let ok = proto_acc == 1.0 && fused_acc == 1.0 && (chance - 0.5).abs() <= 0.07 && endpoints_ok;
    report(
        9,
        "downstream heads",
        ok,
        &format!(
            "prototype accuracy {proto_acc}, fused accuracy {fused_acc}, chance episodes {chance:.4} (0.50 ± 0.07), endpoints {endpoints_ok}"
        ),
    );
    assert!(ok);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mocgvq")).args(args).output().unwrap()
}

#[test]
fn criterion_10_cli_and_file_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    let g = SyntheticDomain::new(1, 40, 4.0, 6, 3).generate(5).unwrap();
    write_graph_file(&g, p("g.json")).unwrap();
    let graph_ok = read_graph_file(p("g.json")).unwrap() == g;

    let gen = cli(&["gen", "--out", &p("data"), "--set", "domain.num_nodes=40", "--set", "domain.feature_dim=8"]);
    let manifest = p("data/manifest.json");
    let train = cli(&["pretrain", "--data", &manifest, "--out", &p("run"), "--set", "epochs=3", "--set", "hidden_dim=8"]);
    let ckpt = p("run/checkpoint.bin");
    let bytes = std::fs::read(&ckpt).unwrap();
    let model = checkpoint::from_bytes(&bytes).unwrap();
    let ckpt_ok = checkpoint::to_bytes(&model) == bytes && checkpoint::load(&ckpt).unwrap() == model;

    let diag = cli(&["diagnose", "--ckpt", &ckpt, "--data", &manifest, "--out", &p("diag")]);
    let hash = checkpoint::checkpoint_hash(&bytes);
    let corpus = mocgvq::data::load_manifest(&manifest).unwrap();
    let expected = serde_json::to_string_pretty(&diagnose(&model, &corpus, &hash).unwrap()).unwrap();
    let written = std::fs::read_to_string(dir.path().join("diag").join(format!("{}.json", file_stem("diagnose", &hash))))
        .unwrap_or_default();
    let diagnose_ok = gen.status.success() && train.status.success() && diag.status.success() && written == expected;

    let bad_value = cli(&["pretrain", "--data", &manifest, "--out", &p("bad1"), "--set", "lambda1=abc"]);
    let bad_key = cli(&["pretrain", "--data", &manifest, "--out", &p("bad2"), "--set", "lambda9=1"]);
    let names = |o: &std::process::Output, key: &str| String::from_utf8_lossy(&o.stderr).contains(key);
    let invalid_ok = bad_value.status.code() == Some(1)
        && names(&bad_value, "lambda1")
        && bad_key.status.code() == Some(1)
        && names(&bad_key, "lambda9");

    let ok = graph_ok && ckpt_ok && diagnose_ok && invalid_ok;
    report(
        10,
        "CLI and file contracts",
        ok,
        &format!(
            "graph round-trip {graph_ok}, checkpoint round-trip {ckpt_ok}, CLI diagnose equals library {diagnose_ok}, invalid keys exit 1 naming key {invalid_ok}"
        ),
    );
    assert!(ok);
}
