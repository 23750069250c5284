//! Command-line front end: `gen`, `pretrain`, `finetune`, `fewshot`,
//! `diagnose` and `inspect-ckpt`.
//!
//! Exit codes: 0 success, 1 invalid input (usage, config, validation),
//! 2 runtime failure.

use crate::checkpoint::{self, checkpoint_hash};
use crate::config::{apply_overrides, parse_over_defaults, TrainConfig};
use crate::data::{class_descriptors, domain_seed, load_manifest, read_graph_file, write_graph_file, write_manifest};
use crate::data::{ManifestEntry, SyntheticDomain};
use crate::error::{Error, Result};
use crate::finetune::{finetune, few_shot_on_embeddings, zero_shot_episode, FinetuneConfig, Splits};
use crate::report::{diagnose, metrics_svg, write_report};
use crate::tensor::Tensor;
use crate::train::{metrics_csv, pretrain, Trainer};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

pub const LOG_ENV: &str = "MOCGVQ_LOG";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
const LOCK_FILE: &str = ".mocgvq.lock";

#[derive(Debug, Parser)]
#[command(name = "mocgvq", about = "Mixture-of-codebooks graph VQ autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on a corpus manifest (or resume from --ckpt).
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus manifest written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "ablation", value_name = "NAME")]
        ablations: Vec<String>,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Fit the prototype + linear head on a labeled graph.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Graph file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run few-shot (or zero-shot with k_shot=0) episodes.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Class-descriptor matrix (JSON tensor) for zero-shot episodes.
        #[arg(long)]
        descriptors: Option<PathBuf>,
    },
    /// Emit the diagnostics report for a checkpoint over a corpus.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print checkpoint header and tensor listing.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Settings of `gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_domains: usize,
    pub seed: u64,
    /// Sampling weight per domain; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Shape shared by every domain (`domain_id` is assigned per domain).
    pub domain: SyntheticDomain,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_domains: 2,
            seed: 42,
            weights: None,
            domain: SyntheticDomain::default(),
        }
    }
}

impl GenConfig {
    /// Writes `domain_<i>.json`, `descriptors_<i>.json` and `manifest.json`
    /// into `dir`; returns the manifest path.
    pub fn generate(&self, dir: &Path) -> Result<PathBuf> {
        if self.num_domains == 0 {
            return Err(Error::Config {
                key: "num_domains".into(),
                detail: "must be >= 1".into(),
            });
        }
        let weights = self.weights.clone().unwrap_or_else(|| vec![1.0; self.num_domains]);
        if weights.len() != self.num_domains {
            return Err(Error::Config {
                key: "weights".into(),
                detail: format!("{} weights for {} domains", weights.len(), self.num_domains),
            });
        }
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (d, &weight) in weights.iter().enumerate() {
            let spec = SyntheticDomain {
                domain_id: d,
                ..self.domain.clone()
            };
            let seed = domain_seed(self.seed, d);
            let g = spec.generate(seed)?;
            let name = format!("domain_{d}.json");
            write_graph_file(&g, dir.join(&name))?;
            let desc = class_descriptors(&spec, seed);
            fs::write(dir.join(format!("descriptors_{d}.json")), to_json(&desc))?;
            entries.push(ManifestEntry { path: name, weight });
        }
        let manifest = dir.join("manifest.json");
        write_manifest(&manifest, &entries)?;
        Ok(manifest)
    }
}

/// Settings of `finetune`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub head: FinetuneConfig,
    pub train_fraction: f64,
    /// Split seed.
    pub seed: u64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            head: FinetuneConfig::default(),
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Settings of `fewshot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotSettings {
    pub n_way: usize,
    /// 0 selects zero-shot episodes (needs `--descriptors`).
    pub k_shot: usize,
    pub query_size: usize,
    pub episodes: usize,
    /// Episode `e` uses seed `seed + e`.
    pub seed: u64,
}

impl Default for FewShotSettings {
    fn default() -> Self {
        FewShotSettings {
            n_way: 2,
            k_shot: 5,
            query_size: 20,
            episodes: 50,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct DiagnoseSettings<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    checkpoint_sha256: &'a str,
}

#[derive(Serialize)]
struct EpisodeSummary {
    settings: FewShotSettings,
    mean_accuracy: f64,
    accuracies: Vec<f64>,
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    test_accuracy: f64,
    train_losses: &'a [f64],
    head: &'a crate::finetune::FinetuneHead,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

/// Exit code for an error: 1 for invalid input, 2 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Validation(_) | Error::Parse { .. } | Error::Argument(_) => 1,
        _ => 2,
    }
}

/// Advisory lock on an output directory, released on drop.
struct OutDirLock(PathBuf);

impl OutDirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, common: &Common) -> Result<T> {
    let base = match &common.config {
        Some(p) => parse_over_defaults(defaults, &fs::read_to_string(p)?)?,
        None => serde_json::from_value(serde_json::to_value(defaults).expect("serializes")).expect("round trip"),
    };
    apply_overrides(&base, &common.overrides)
}

fn resolve_train(common: &Common, ablations: &[String]) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg = cfg.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for a in ablations {
        cfg.ablation.set(a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_snapshot<T: Serialize>(dir: &Path, v: &T) -> Result<()> {
    fs::write(dir.join(RESOLVED_CONFIG), to_json(v))?;
    Ok(())
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        detail: e.to_string(),
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common } => {
            let mut cfg = resolve(&GenConfig::default(), &common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let _lock = OutDirLock::acquire(&common.out)?;
            write_snapshot(&common.out, &cfg)?;
            let manifest = cfg.generate(&common.out)?;
            emit(&manifest.display().to_string());
        }
        Command::Pretrain {
            common,
            data,
            ablations,
            ckpt,
        } => {
            let corpus = load_manifest(&data)?;
            match ckpt {
                None => {
                    let cfg = resolve_train(&common, &ablations)?;
                    let _lock = OutDirLock::acquire(&common.out)?;
                    write_snapshot(&common.out, &cfg)?;
                    let out = pretrain(&corpus, &cfg, Some(&common.out))?;
                    fs::write(common.out.join("metrics.svg"), metrics_svg(&out.log))?;
                    emit(&checkpoint_hash(&out.checkpoint));
                }
                Some(path) => {
                    let model = checkpoint::load(&path)?;
                    // only the epoch count may change on resume
                    let mut wanted = model.cfg.with_overrides(&common.overrides)?;
                    if let Some(s) = common.seed {
                        wanted.seed = s;
                    }
                    for a in &ablations {
                        wanted.ablation.set(a)?;
                    }
                    let mut cfg = wanted.clone();
                    cfg.epochs = model.cfg.epochs;
                    if common.config.is_some() || cfg != model.cfg {
                        return Err(Error::Config {
                            key: "resume".into(),
                            detail: "only `epochs` may differ from the checkpoint's config".into(),
                        });
                    }
                    let mut model = model;
                    model.cfg.epochs = wanted.epochs;
                    let _lock = OutDirLock::acquire(&common.out)?;
                    write_snapshot(&common.out, &model.cfg)?;
                    let mut trainer = Trainer::resume(&corpus, model)?;
                    trainer.run()?;
                    let (model, log) = trainer.into_parts();
                    fs::write(common.out.join("metrics.csv"), metrics_csv(&log))?;
                    fs::write(common.out.join("metrics.svg"), metrics_svg(&log))?;
                    let bytes = checkpoint::save(&model, common.out.join("checkpoint.bin"))?;
                    emit(&checkpoint_hash(&bytes));
                }
            }
        }
        Command::Finetune { common, ckpt, data } => {
            let mut s = resolve(&FinetuneSettings::default(), &common)?;
            if let Some(seed) = common.seed {
                s.seed = seed;
            }
            s.head.validate()?;
            let model = checkpoint::load(&ckpt)?;
            let g = read_graph_file(&data)?;
            let _lock = OutDirLock::acquire(&common.out)?;
            write_snapshot(&common.out, &s)?;
            let splits = Splits::random(g.num_nodes(), s.train_fraction, s.seed)?;
            let r = finetune(&model, &g, &splits, &s.head)?;
            let summary = FinetuneSummary {
                test_accuracy: r.test_accuracy,
                train_losses: &r.train_losses,
                head: &r.head,
            };
            fs::write(common.out.join("finetune.json"), to_json(&summary))?;
            emit(&format!("test accuracy {:.4}", r.test_accuracy));
        }
        Command::Fewshot {
            common,
            ckpt,
            data,
            descriptors,
        } => {
            let mut s = resolve(&FewShotSettings::default(), &common)?;
            if let Some(seed) = common.seed {
                s.seed = seed;
            }
            let model = checkpoint::load(&ckpt)?;
            let g = read_graph_file(&data)?;
            let desc = match (&descriptors, s.k_shot) {
                (Some(p), _) => Some(read_tensor(p)?),
                (None, 0) => {
                    return Err(Error::Argument("zero-shot episodes need --descriptors".into()));
                }
                (None, _) => None,
            };
            let _lock = OutDirLock::acquire(&common.out)?;
            write_snapshot(&common.out, &s)?;
            let labels = g.node_labels().ok_or_else(|| Error::arg("graph carries no node labels"))?;
            let z = model.embed(&g)?.quantized;
            let mut accuracies = Vec::with_capacity(s.episodes);
            for e in 0..s.episodes as u64 {
                let seed = s.seed + e;
                accuracies.push(match (s.k_shot, &desc) {
                    (0, Some(d)) => zero_shot_episode(&model, &g, d, s.n_way, s.query_size, seed)?,
                    _ => few_shot_on_embeddings(&z, labels, s.n_way, s.k_shot, s.query_size, seed)?,
                });
            }
            let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
            let summary = EpisodeSummary {
                settings: s,
                mean_accuracy,
                accuracies,
            };
            fs::write(common.out.join("fewshot.json"), to_json(&summary))?;
            emit(&format!("mean accuracy {mean_accuracy:.4}"));
        }
        Command::Diagnose { common, ckpt, data } => {
            let bytes = fs::read(&ckpt)?;
            let hash = checkpoint_hash(&bytes);
            let model = checkpoint::from_bytes(&bytes)?;
            let corpus = load_manifest(&data)?;
            let _lock = OutDirLock::acquire(&common.out)?;
            write_snapshot(
                &common.out,
                &DiagnoseSettings {
                    ckpt: &ckpt,
                    data: &data,
                    checkpoint_sha256: &hash,
                },
            )?;
            let report = diagnose(&model, &corpus, &hash)?;
            for p in write_report(&report, &common.out, "diagnose")? {
                emit(&p.display().to_string());
            }
        }
        Command::InspectCkpt { ckpt, out } => {
            let info = checkpoint::inspect(&fs::read(&ckpt)?)?;
            let text = to_json(&info);
            if let Some(dir) = out {
                let _lock = OutDirLock::acquire(&dir)?;
                fs::write(dir.join(format!("inspect-{}.json", &info.sha256[..16])), &text)?;
            }
            emit(&text);
        }
    }
    Ok(())
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
