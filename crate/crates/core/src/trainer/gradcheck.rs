//! Finite-difference verification of [`backward`](super::backward).

use crate::error::Result;
use crate::metric_loss::Hyperparams;
use crate::trainer::backprop::{backward, forward, Gradients};
use crate::trainer::model::ModelParams;

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, 1e-8)` over every parameter entry.
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of the batch loss with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every learnable entry.
pub fn grad_check(
    params: &ModelParams,
    inputs: &[&[f64]],
    labels: &[usize],
    hp: &Hyperparams,
    include_lx: bool,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, cache) = forward(params, inputs, labels, hp, include_lx)?;
    let analytic = backward(params, &cache)?;
    compare_gradients(params, inputs, labels, hp, include_lx, h, &analytic)
}

/// Same as [`grad_check`] but against caller-supplied gradients (used for negative controls).
pub fn compare_gradients(
    params: &ModelParams,
    inputs: &[&[f64]],
    labels: &[usize],
    hp: &Hyperparams,
    include_lx: bool,
    h: f64,
    analytic: &Gradients,
) -> Result<GradCheckReport> {
    let names = analytic.tensor_names();
    let grad_tensors = analytic.tensors();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries: 0,
    };
    let sizes: Vec<usize> = grad_tensors.iter().map(|t| t.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for idx in 0..len {
            let original = work.tensors_mut()[t][idx];
            work.tensors_mut()[t][idx] = original + h;
            let plus = forward(&work, inputs, labels, hp, include_lx)?.0.total;
            work.tensors_mut()[t][idx] = original - h;
            let minus = forward(&work, inputs, labels, hp, include_lx)?.0.total;
            work.tensors_mut()[t][idx] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad_tensors[t][idx];
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.0.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = (names[t].clone(), idx);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
