//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the loss, so it is independent of
//! the reverse-mode implementation it checks.

use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::Result;

/// Denominator floor for relative error; gradients smaller than this are in
/// effect compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central difference of `loss` with respect to one element.
pub fn central_difference(
    store: &ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    loss: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let mut plus = store.clone();
    plus.get_mut(id).data_mut()[index] += h;
    let mut minus = store.clone();
    minus.get_mut(id).data_mut()[index] -= h;
    Ok((loss(&plus)? - loss(&minus)?) / (2.0 * h))
}

/// Compares `analytic` against central differences for every element of
/// every parameter accepted by `filter`. Parameters missing from `analytic`
/// are treated as having zero gradient.
pub fn check_params(
    store: &ParamStore,
    analytic: &ParamGrads,
    h: f64,
    filter: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for id in store.ids() {
        let name = store.name(id);
        if !filter(name) {
            continue;
        }
        for i in 0..store.get(id).numel() {
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let n = central_difference(store, id, i, h, &loss)?;
            let rel = relative_error(a, n);
            report.checked += 1;
            if rel > report.worst_rel_err || report.worst_param.is_empty() {
                report.worst_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
    }
    Ok(report)
}
