//! Central finite-difference comparison of tape gradients.

use super::store::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Differences below this magnitude are compared absolutely rather than
/// relatively; finite differences cannot resolve smaller gradients.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map(|w| w.rel_err).unwrap_or(0.0)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Compares the tape gradient of `loss_fn` with central differences using
/// step 1e-5·max(1, |θ|) for every parameter entry accepted by `filter`.
/// `loss_fn` builds a fresh tape and returns it with its scalar loss node.
pub fn gradcheck(
    store: &mut ParameterStore,
    mut loss_fn: impl FnMut(&ParameterStore) -> Result<(Tape, Var)>,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    store.zero_grads();
    let (mut tape, loss) = loss_fn(store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.entries().iter().map(|e| e.grad.data.clone()).collect();
    store.zero_grads();

    let mut report = GradCheckReport { checked: 0, worst: None };
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = store.entry(id).name.clone();
        if !filter(&name) {
            continue;
        }
        for idx in 0..store.value(id).len() {
            let theta = store.value(id).data[idx];
            let step = 1e-5 * theta.abs().max(1.0);
            store.value_mut(id).data[idx] = theta + step;
            let (t_plus, l_plus) = loss_fn(store)?;
            let plus = t_plus.scalar(l_plus);
            store.value_mut(id).data[idx] = theta - step;
            let (t_minus, l_minus) = loss_fn(store)?;
            let minus = t_minus.scalar(l_minus);
            store.value_mut(id).data[idx] = theta;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k][idx];
            let rel_err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(GradCheckEntry {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}
