//! Corpus-level diagnostics of a trained model and their file outputs
//! (JSON report, CSV histogram tables, SVG renderings).

use crate::data::DomainCorpus;
use crate::diagnostics::{
    angular_uniformity, domain_kl_heatmap, effective_rank, landscape_1d, utilization_entropy, AngularStats, KlMatrix,
    Landscape,
};
use crate::error::Result;
use crate::model::MocModel;
use crate::tensor::Tensor;
use crate::train::MetricRow;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub checkpoint_sha256: String,
    /// KL between per-domain Gaussians of the hidden embeddings.
    pub pairwise_domain_kl: KlMatrix,
    pub codebook_utilization_entropy: f64,
    /// `ln(M·K)`, the ceiling of the entropy above.
    pub max_utilization_entropy: f64,
    pub mean_pairwise_angular_distance_h: AngularStats,
    pub mean_pairwise_angular_distance_zq: AngularStats,
    pub mean_pairwise_angular_distance_codes: f64,
    pub effective_rank: f64,
    pub landscape_quantized: Landscape,
    /// Reconstructed features projected on the original features' axis.
    pub landscape_reconstruction: Landscape,
}

/// Runs every diagnostic over all graphs of `corpus` in eval mode.
pub fn diagnose(model: &MocModel, corpus: &DomainCorpus, checkpoint_sha256: &str) -> Result<DiagnosticsReport> {
    let mut hs = Vec::new();
    let mut zs = Vec::new();
    let mut xs = Vec::new();
    let mut domains = Vec::new();
    let mut activations = Vec::new();
    for g in corpus.graphs() {
        let e = model.embed(g)?;
        domains.extend(std::iter::repeat(g.domain_id()).take(g.num_nodes()));
        activations.extend(e.outcome.activations());
        hs.push(e.hidden);
        zs.push(e.quantized);
        xs.push(g.node_features().clone());
    }
    let stack = |v: &[Tensor]| Tensor::vstack(&v.iter().collect::<Vec<_>>());
    let (h, zq, x) = (stack(&hs)?, stack(&zs)?, stack(&xs)?);
    let recon = model.net.heads.feature.forward(&model.store, &zq)?;
    let bank = &model.net.bank;
    Ok(DiagnosticsReport {
        checkpoint_sha256: checkpoint_sha256.to_string(),
        pairwise_domain_kl: domain_kl_heatmap(&h, &domains, corpus.max_domain_id() + 1)?,
        codebook_utilization_entropy: utilization_entropy(activations),
        max_utilization_entropy: ((bank.num_codebooks() * bank.codebook_size()) as f64).ln(),
        mean_pairwise_angular_distance_h: angular_uniformity(&h)?,
        mean_pairwise_angular_distance_zq: angular_uniformity(&zq)?,
        mean_pairwise_angular_distance_codes: angular_uniformity(model.codes())?.mean,
        effective_rank: effective_rank(&h),
        landscape_quantized: landscape_1d(&zq, None)?,
        landscape_reconstruction: landscape_1d(&recon, Some(&x))?,
    })
}

/// Deterministic output stem: `<op>-<first 16 hex digits of the hash>`.
pub fn file_stem(op: &str, checkpoint_sha256: &str) -> String {
    let n = checkpoint_sha256.len().min(16);
    format!("{op}-{}", &checkpoint_sha256[..n])
}

fn landscape_csv(l: &Landscape, series: &str, reference: &str) -> String {
    let h = &l.histogram;
    let width = (h.hi - h.lo) / h.counts.len() as f64;
    let mut s = format!("bucket,lo,hi,{series},{reference}\n");
    for (b, (c, r)) in h.counts.iter().zip(&l.reference_histogram.counts).enumerate() {
        let lo = h.lo + width * b as f64;
        let _ = writeln!(s, "{b},{lo},{},{c},{r}", lo + width);
    }
    s
}

fn svg_open(w: u32, h: u32) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Grey-scale heatmap; undefined cells are hatched red.
pub fn heatmap_svg(kl: &KlMatrix) -> String {
    let m = kl.size().max(1);
    let cell = 48;
    let size = cell * m as u32 + 40;
    let max = kl
        .values
        .iter()
        .flatten()
        .flatten()
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut s = svg_open(size, size);
    for (a, row) in kl.values.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let (x, y) = (20 + b as u32 * cell, 20 + a as u32 * cell);
            match v {
                Some(v) => {
                    let shade = 255 - (255.0 * v / max).round() as u32;
                    let _ = writeln!(
                        s,
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},{shade})\"><title>{v}</title></rect>"
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"none\" stroke=\"red\"/>"
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Polylines of several equally long series, each scaled to the plot box.
pub fn lines_svg(series: &[(&str, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 320.0, 30.0);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = svg_open(w as u32, h as u32);
    for (i, (name, ys)) in series.iter().enumerate() {
        if ys.is_empty() {
            continue;
        }
        let finite = ys.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(v), u.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let dx = if ys.len() > 1 { (w - 2.0 * pad) / (ys.len() - 1) as f64 } else { 0.0 };
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.2},{:.2}", pad + dx * k as f64, h - pad - (v - lo) / span * (h - 2.0 * pad)))
            .collect();
        let color = colors[i % colors.len()];
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name} [{lo:.4}, {hi:.4}]</text>",
            pad,
            14.0 + 13.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Loss-curve rendering of a metric log.
pub fn metrics_svg(rows: &[MetricRow]) -> String {
    let col = |f: fn(&MetricRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    lines_svg(&[
        ("loss_total", col(|r| r.loss_total)),
        ("loss_feat", col(|r| r.loss_feat)),
        ("loss_topo", col(|r| r.loss_topo)),
        ("loss_con", col(|r| r.loss_con)),
        ("loss_load", col(|r| r.loss_load)),
        ("codebook_entropy", col(|r| r.codebook_entropy)),
    ])
}

fn counts(l: &[usize]) -> Vec<f64> {
    l.iter().map(|&c| c as f64).collect()
}

/// Writes the report as `<stem>.json`, two landscape CSVs and three SVGs
/// into `dir`. Returns the written paths.
pub fn write_report(report: &DiagnosticsReport, dir: &Path, op: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let stem = file_stem(op, &report.checkpoint_sha256);
    let q = &report.landscape_quantized;
    let r = &report.landscape_reconstruction;
    let files = [
        (format!("{stem}.json"), serde_json::to_string_pretty(report).expect("report serializes")),
        (format!("{stem}-landscape-quantized.csv"), landscape_csv(q, "quantized", "quantized_ref")),
        (format!("{stem}-landscape-reconstruction.csv"), landscape_csv(r, "reconstructed", "original")),
        (format!("{stem}-kl.svg"), heatmap_svg(&report.pairwise_domain_kl)),
        (
            format!("{stem}-landscape-quantized.svg"),
            lines_svg(&[("quantized", counts(&q.histogram.counts))]),
        ),
        (
            format!("{stem}-landscape-reconstruction.svg"),
            lines_svg(&[
                ("reconstructed", counts(&r.histogram.counts)),
                ("original", counts(&r.reference_histogram.counts)),
            ]),
        ),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &path)?;
        out.push(path);
    }
    Ok(out)
}
