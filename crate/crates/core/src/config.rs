//! Training configuration, its JSON form, dotted-key overrides and the
//! ablation switchboard.

use crate::error::{Error, Result};
use crate::objectives::{LossWeights, SelfTerms};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Plain mean aggregation without edge states.
    pub no_fusion: bool,
    /// One codebook, Top-1.
    pub single_codebook: bool,
    /// Commitment MSE instead of the triple-contrastive term.
    pub commitment_loss: bool,
    /// Importance-balancing loss instead of the domain-aware load term.
    pub classic_load_loss: bool,
    /// Load term disabled.
    pub no_load_loss: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 5] = [
        "no_fusion",
        "single_codebook",
        "commitment_loss",
        "classic_load_loss",
        "no_load_loss",
    ];

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_fusion" => self.no_fusion = true,
            "single_codebook" => self.single_codebook = true,
            "commitment_loss" => self.commitment_loss = true,
            "classic_load_loss" => self.classic_load_loss = true,
            "no_load_loss" => self.no_load_loss = true,
            other => {
                return Err(Error::Config {
                    key: "ablation".into(),
                    detail: format!("unknown ablation `{other}`; expected one of {:?}", Self::NAMES),
                })
            }
        }
        Ok(())
    }

    pub fn any(&self) -> bool {
        self.no_fusion || self.single_codebook || self.commitment_loss || self.classic_load_loss || self.no_load_loss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub p_f: f64,
    pub p_t: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub tau: f64,
    pub contrastive_self_terms: SelfTerms,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub top_k: usize,
    pub negative_ratio: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: small dims, every loss weight, masking rate,
    /// temperature and routing setting as in the reference configuration.
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            weight_decay: 1e-5,
            epochs: 200,
            batch_size: 2,
            num_layers: 2,
            hidden_dim: 32,
            dropout: 0.15,
            batch_norm: true,
            p_f: 0.1,
            p_t: 0.1,
            lambda1: 100.0,
            lambda2: 0.01,
            lambda3: 0.001,
            lambda4: 0.01,
            tau: 0.5,
            contrastive_self_terms: SelfTerms::Include,
            num_codebooks: 4,
            codebook_size: 32,
            top_k: 2,
            negative_ratio: 1,
            grad_clip: 5.0,
            seed: 42,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size pretraining configuration.
    pub fn reference() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 5,
            batch_size: 1024,
            hidden_dim: 768,
            num_codebooks: 16,
            codebook_size: 256,
            top_k: 2,
            ..TrainConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            feat: self.lambda1,
            topo: self.lambda2,
            con: self.lambda3,
            load: self.lambda4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, detail: String) -> Error {
            Error::Config {
                key: key.into(),
                detail,
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_codebooks", self.num_codebooks),
            ("codebook_size", self.codebook_size),
            ("negative_ratio", self.negative_ratio),
        ] {
            if v == 0 {
                return Err(bad(k, "must be >= 1".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        for (k, v) in [("p_f", self.p_f), ("p_t", self.p_t)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(k, format!("must lie in [0, 1], got {v}")));
            }
        }
        for (k, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(k, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(bad("tau", format!("must be positive, got {}", self.tau)));
        }
        if self.top_k == 0 || self.top_k > self.num_codebooks {
            return Err(bad(
                "top_k",
                format!("must lie in [1, num_codebooks={}], got {}", self.num_codebooks, self.top_k),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(bad("grad_clip", format!("must be positive, got {}", self.grad_clip)));
        }
        let a = &self.ablation;
        if a.classic_load_loss && a.no_load_loss {
            return Err(bad(
                "ablation",
                "classic_load_loss and no_load_loss are contradictory".into(),
            ));
        }
        if a.single_codebook && a.classic_load_loss {
            return Err(bad(
                "ablation",
                "classic_load_loss has nothing to balance with a single codebook".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Parses a (possibly partial) JSON config over the defaults, naming
    /// the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("config line {} column {}", e.line(), e.column()),
            detail: e.to_string(),
        })?;
        Self::from_value(v)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: TrainConfig = merge_over_defaults(&TrainConfig::default(), v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides (dotted keys reach into `ablation`).
    /// Values parse as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let cfg = apply_overrides(self, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves the ablation flags into the concrete pipeline wiring.
    pub fn apply_ablation(&self) -> Result<Pipeline> {
        self.validate()?;
        let a = &self.ablation;
        let (num_codebooks, top_k) = if a.single_codebook {
            (1, 1)
        } else {
            (self.num_codebooks, self.top_k)
        };
        let load = if a.no_load_loss || a.single_codebook {
            LoadTerm::Off
        } else if a.classic_load_loss {
            LoadTerm::Importance
        } else {
            LoadTerm::DomainAware
        };
        let mut weights = self.loss_weights();
        if load == LoadTerm::Off {
            weights.load = 0.0;
        }
        Ok(Pipeline {
            edge_fusion: !a.no_fusion,
            num_codebooks,
            top_k,
            alignment: if a.commitment_loss {
                AlignmentTerm::Commitment
            } else {
                AlignmentTerm::TripleContrastive(self.contrastive_self_terms)
            },
            load,
            weights,
        })
    }
}

/// Parses a (possibly partial) JSON object over `defaults`, naming the
/// first unknown or ill-typed key.
pub fn merge_over_defaults<T: Serialize + DeserializeOwned>(defaults: &T, v: Value) -> Result<T> {
    let obj = v.as_object().ok_or_else(|| Error::Config {
        key: "<root>".into(),
        detail: "config must be a JSON object".into(),
    })?;
    let defaults = serde_json::to_value(defaults).expect("config serializes");
    let known = defaults.as_object().expect("config is an object");
    for (key, val) in obj {
        let Some(default_val) = known.get(key) else {
            return Err(Error::Config {
                key: key.clone(),
                detail: "unknown key".into(),
            });
        };
        if let (Some(sub), Some(dsub)) = (val.as_object(), default_val.as_object()) {
            if let Some(k) = sub.keys().find(|k| !dsub.contains_key(*k)) {
                return Err(Error::Config {
                    key: format!("{key}.{k}"),
                    detail: "unknown key".into(),
                });
            }
        }
        let mut probe = defaults.clone();
        merge(&mut probe, key, val.clone());
        if let Err(e) = serde_json::from_value::<T>(probe) {
            return Err(Error::Config {
                key: key.clone(),
                detail: e.to_string(),
            });
        }
    }
    let mut merged = defaults;
    for (key, val) in obj {
        merge(&mut merged, key, val.clone());
    }
    serde_json::from_value(merged).map_err(|e| Error::Config {
        key: "<root>".into(),
        detail: e.to_string(),
    })
}

/// Parses JSON text over `defaults`; see [`merge_over_defaults`].
pub fn parse_over_defaults<T: Serialize + DeserializeOwned>(defaults: &T, text: &str) -> Result<T> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: format!("config line {} column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    merge_over_defaults(defaults, v)
}

/// Applies dotted `key=value` overrides to any JSON-shaped config.
pub fn apply_overrides<T: Serialize + DeserializeOwned, S: AsRef<str>>(base: &T, overrides: &[S]) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config {
            key: o.to_string(),
            detail: "override must look like key=value".into(),
        })?;
        let key = key.trim();
        let parsed = serde_json::from_str::<Value>(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
        let path: Vec<&str> = key.split('.').collect();
        let mut cursor = &mut v;
        for (i, part) in path.iter().enumerate() {
            let obj = cursor.as_object_mut().ok_or_else(|| Error::Config {
                key: key.to_string(),
                detail: "not an object".into(),
            })?;
            if !obj.contains_key(*part) {
                return Err(Error::Config {
                    key: key.to_string(),
                    detail: "unknown key".into(),
                });
            }
            if i + 1 == path.len() {
                obj.insert(part.to_string(), parsed.clone());
                break;
            }
            cursor = obj.get_mut(*part).unwrap();
        }
        if let Err(e) = serde_json::from_value::<T>(v.clone()) {
            return Err(Error::Config {
                key: key.to_string(),
                detail: e.to_string(),
            });
        }
    }
    Ok(serde_json::from_value(v).expect("checked above"))
}

fn merge(target: &mut Value, key: &str, val: Value) {
    let obj = target.as_object_mut().unwrap();
    match (obj.get_mut(key), val) {
        (Some(Value::Object(dst)), Value::Object(src)) => {
            for (k, v) in src {
                dst.insert(k, v);
            }
        }
        (_, val) => {
            obj.insert(key.to_string(), val);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentTerm {
    TripleContrastive(SelfTerms),
    Commitment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadTerm {
    DomainAware,
    Importance,
    Off,
}

/// Concrete wiring after ablations are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pipeline {
    pub edge_fusion: bool,
    pub num_codebooks: usize,
    pub top_k: usize,
    pub alignment: AlignmentTerm,
    pub load: LoadTerm,
    pub weights: LossWeights,
}
