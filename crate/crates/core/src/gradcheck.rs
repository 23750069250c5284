//! Central finite-difference checks against analytic gradients.

use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Absolute floor for the relative-error denominator, so coordinates whose
/// true gradient is ~0 are judged by absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(label, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, label: &str, coord: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((label.to_string(), coord, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err && other.worst.is_some() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Checks `analytic` against central differences of `f` around `x`.
pub fn check_tensor(
    label: &str,
    x: &Tensor,
    analytic: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.record(label, i, analytic.data()[i], (fp - fm) / (2.0 * step));
    }
    out
}

/// Checks the gradients accumulated in `analytic` for the listed
/// `(param, coordinate)` pairs by perturbing `store` in place.
pub fn check_store_coords(
    store: &mut ParamStore,
    analytic: &ParamStore,
    coords: &[(ParamId, usize)],
    step: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    for &(id, i) in coords {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + step;
        let fp = f(store);
        store.value_mut(id).data_mut()[i] = orig - step;
        let fm = f(store);
        store.value_mut(id).data_mut()[i] = orig;
        let label = store.name(id).to_string();
        out.record(&label, i, analytic.grad(id).data()[i], (fp - fm) / (2.0 * step));
    }
    out
}

/// Every coordinate of every listed parameter.
pub fn all_coords(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect()
}
