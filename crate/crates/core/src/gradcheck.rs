//! Central finite-difference checks of the analytic gradients.

use crate::corpus::Batch;
use crate::error::Result;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, floor)` over all checked entries.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Compares `forward_backward` gradients of the joint loss with central
/// differences of step `h`, entry by entry over every parameter.
///
/// Dropout masks depend only on `seed`, so `train_mode` may be on.
pub fn check_joint(
    model: &Model<f64>,
    batch: &Batch,
    train_mode: bool,
    seed: u64,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut grads = model.store.zeros_like();
    model.forward_backward(batch, train_mode, seed, Some(&mut grads))?;
    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).len();
        for i in 0..n {
            let orig = model.store.get(id).as_slice().unwrap()[i];
            let mut eval = |x: f64| -> Result<f64> {
                probe.store.get_mut(id).as_slice_mut().unwrap()[i] = x;
                Ok(probe.forward_backward(batch, train_mode, seed, None)?.joint)
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            eval(orig)?;
            let analytic = grads.get(id).as_slice().unwrap()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (model.store.name(id).to_string(), i);
            }
        }
    }
    Ok(report)
}
