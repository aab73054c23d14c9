//! Central finite-difference check of analytic gradients.

use serde::Serialize;

use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub tol: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(move |e| e.max_rel_err >= self.tol)
    }
}

/// Compares `analytic` against `(f(θ+h) - f(θ-h)) / 2h` for every scalar of
/// every parameter in `params`. `f` must be deterministic.
pub fn gradcheck<F>(
    params: &ParamStore,
    analytic: &ParamGrads,
    h: f64,
    tol: f64,
    mut f: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let grad = analytic.get(id);
        let mut entry = GradcheckEntry {
            name: params.name(id).to_string(),
            numel: grad.numel(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..grad.numel() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at {}[{i}] ± {h}",
                    entry.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = rel_error(a, numeric);
            if err > entry.max_rel_err || i == 0 {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradcheckReport { h, tol, entries })
}
