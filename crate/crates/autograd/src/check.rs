//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() && other.max_rel_error >= self.max_rel_error {
                self.worst = other.worst;
            }
        }
        self
    }
}

/// Compares `analytic` against `(f(θ+ε) - f(θ-ε)) / 2ε` for every entry of
/// every parameter in `ids`. Parameters absent from `analytic` are treated as
/// having zero gradient. `store` is restored before returning.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    analytic: &BTreeMap<ParamId, Mat>,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let zero = Mat::zeros(store.get(id).rows(), store.get(id).cols());
        let a = analytic.get(&id).unwrap_or(&zero);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), i, a.data()[i], numeric));
            }
        }
    }
    report
}
