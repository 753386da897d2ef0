//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of `loss` w.r.t. every trainable entry of
/// `store` with `(f(w + h) - f(w - h)) / 2h`.
///
/// Errors are `|tape - fd| / max(|tape|, |fd|, floor)` where `floor` is
/// `1e-6` of the largest tape gradient, so entries with negligible gradient
/// do not dominate the report.
pub fn grad_check<F>(store: &mut ParamStore<f64>, loss: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(s, &mut tape)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let root = loss(store, &mut tape)?;
    tape.backward(root)?;
    store.zero_grads();
    store.pull_grads(&tape);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    let largest = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-6 * largest).max(1e-12);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        for k in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[pi][k];
            if !fd.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.get(id).name)));
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
