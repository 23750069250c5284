//! Named parameter storage and the decoupled-weight-decay Adam update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;

/// Handle into a [`ParamStore`]; stable for the life of the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub moment1: Tensor,
    pub moment2: Tensor,
    /// Buffers (batch-norm running statistics) are stored alongside the
    /// weights so they checkpoint together, but the optimizer skips them.
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Tensor::zeros(r, c),
            moment1: Tensor::zeros(r, c),
            moment2: Tensor::zeros(r, c),
            trainable,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
    step_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, true)
    }

    /// Registers a non-trainable buffer.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.entries.contains_key(&name) {
            return Err(Error::state(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, Param::new(value, trainable));
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Adds `g` into the gradient accumulator of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = &mut self.entries[id.0];
        if p.grad.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "accumulate",
                left: p.grad.shape(),
                right: g.shape(),
            });
        }
        p.grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, p))| (ParamId(i), k.as_str(), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all trainable gradients so their global norm is at most
    /// `max_norm`; returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let total = self.grad_norm();
        if total > max_norm && total > 0.0 {
            let s = max_norm / total;
            for p in self.entries.values_mut().filter(|p| p.trainable) {
                p.grad.scale_in_place(s);
            }
        }
        total
    }

    /// First trainable entry carrying a non-finite gradient.
    pub fn first_non_finite_grad(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, p)| p.trainable && !p.grad.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// One AdamW step over every trainable entry, then zero all gradients.
    ///
    /// Decay multiplies the value by `1 - lr * weight_decay` before the
    /// moment-based update; it never passes through the moments. A non-finite
    /// gradient anywhere aborts the step before any value is touched.
    pub fn adaptive_moment_step(&mut self, cfg: &AdamWConfig) -> Result<()> {
        if let Some(name) = self.first_non_finite_grad() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for p in self.entries.values_mut().filter(|p| p.trainable) {
            let Param {
                value,
                grad,
                moment1,
                moment2,
                ..
            } = p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(moment1.data_mut())
                .zip(moment2.data_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }
}
