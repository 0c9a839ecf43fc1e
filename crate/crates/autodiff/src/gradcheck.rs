//! Central-difference gradient verification.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor for the relative-error denominator, so that near-zero gradients do
/// not blow the ratio up.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Outcome of a gradient check, including where the worst element sits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of the scalar function `f` at `input`
/// with central differences `(f(x+eps) - f(x-eps)) / (2 eps)`, element by
/// element, and returns the worst relative error.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_report(f, input, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, input: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let out = f(&mut g, x)?;
    if !g.value(out).is_scalar() {
        return Err(AutodiffError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.data().first().copied().unwrap_or(0.0),
        numeric: 0.0,
        checked: input.numel(),
    };
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if i == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
