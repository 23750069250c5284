//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, format version, input dim, length-prefixed config JSON,
//! optimizer step, RNG seed, then one record per tensor
//! (name, trainable flag, shape, value, first and second moments).

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::MocModel;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MOCGVQ1\0";
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of checkpoint bytes.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

pub fn to_bytes(model: &MocModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u64(&mut out, model.input_dim as u64);
    put_bytes(&mut out, model.cfg.to_json().as_bytes());
    put_u64(&mut out, model.store.step_count());
    // all per-step randomness is derived from (seed, step)
    put_u64(&mut out, model.cfg.seed);
    put_u64(&mut out, model.store.len() as u64);
    for (_, name, p) in model.store.iter() {
        put_bytes(&mut out, name.as_bytes());
        out.push(p.trainable as u8);
        put_u64(&mut out, p.value.rows() as u64);
        put_u64(&mut out, p.value.cols() as u64);
        for t in [&p.value, &p.moment1, &p.moment2] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u64(what)? as usize;
        self.take(n, what)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

struct Header {
    version: u32,
    input_dim: usize,
    cfg: TrainConfig,
    step: u64,
    seed: u64,
    num_params: usize,
}

fn read_header(r: &mut Reader) -> Result<Header> {
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let input_dim = r.u64("input dim")? as usize;
    let cfg = TrainConfig::from_json(&r.string("config")?)?;
    Ok(Header {
        version,
        input_dim,
        cfg,
        step: r.u64("step")?,
        seed: r.u64("rng seed")?,
        num_params: r.u64("param count")? as usize,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<MocModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_header(&mut r)?;
    if h.seed != h.cfg.seed {
        return Err(Error::Checkpoint("RNG seed disagrees with config".into()));
    }
    let mut model = MocModel::init(&h.cfg, h.input_dim)?;
    if h.num_params != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, layout expects {}",
            h.num_params,
            model.store.len()
        )));
    }
    for _ in 0..h.num_params {
        let name = r.string("tensor name")?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let trainable = r.take(1, "trainable flag")?[0] != 0;
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let p = model.store.param_mut(id);
        if p.trainable != trainable || p.value.shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {rows}x{cols} (trainable={trainable}), layout expects {:?} (trainable={})",
                p.value.shape(),
                p.trainable
            )));
        }
        for t in [&mut p.value, &mut p.moment1, &mut p.moment2] {
            for v in t.data_mut() {
                *v = r.f64(&name)?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.store.set_step_count(h.step);
    Ok(model)
}

/// Writes atomically through a temporary file and rename.
pub fn save(model: &MocModel, path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = to_bytes(model);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<MocModel> {
    from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

/// Header and tensor listing of a checkpoint.
#[derive(Clone, Debug, Serialize)]
pub struct CheckpointInfo {
    pub format_version: u32,
    pub sha256: String,
    pub input_dim: usize,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    pub tensors: Vec<TensorInfo>,
    pub num_trainable_values: usize,
}

pub fn inspect(bytes: &[u8]) -> Result<CheckpointInfo> {
    let model = from_bytes(bytes)?;
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_header(&mut r)?;
    let tensors = model
        .store
        .iter()
        .map(|(_, name, p)| TensorInfo {
            name: name.to_string(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            trainable: p.trainable,
        })
        .collect();
    Ok(CheckpointInfo {
        format_version: h.version,
        sha256: checkpoint_hash(bytes),
        input_dim: h.input_dim,
        step: h.step,
        seed: h.seed,
        config: h.cfg,
        tensors,
        num_trainable_values: model.store.num_trainable(),
    })
}
