//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    /// Elements whose relative error exceeds the tolerance.
    pub flagged: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` with central differences for
/// every element of every parameter in `store` (frozen ones included).
///
/// `loss_fn` must build a scalar loss from the parameters it reads out of
/// the store it is handed.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grad();
    g.accumulate_param_grads(store);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = loss_fn(&mut g, store)?;
        Ok(g.data(loss)[0])
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        for i in 0..n {
            let original = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = original + FD_STEP;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original - FD_STEP;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = store.grad(id)[i];
            let err = rel_error(analytic, numeric);
            let entry = || GradCheckEntry {
                param: store.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: err,
            };
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(entry());
            }
            if err > tolerance {
                report.flagged.push(entry());
            }
        }
    }
    Ok(report)
}
