use crate::error::{Error, Result};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient returned by `f` at `params` with central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε`, one coordinate at a time.
///
/// `f` returns the loss and its analytic gradient; only the loss is used at
/// perturbed points. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<GradientReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!("epsilon must be positive, got {eps}")));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dims(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut report = GradientReport {
        max_relative_error: 0.0,
        worst_parameter_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut theta = params.to_vec();
    let mut first = true;
    for idx in 0..params.len() {
        let orig = theta[idx];
        theta[idx] = orig + eps;
        let (plus, _) = f(&theta)?;
        theta[idx] = orig - eps;
        let (minus, _) = f(&theta)?;
        theta[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at perturbed parameter {idx}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if first || rel > report.max_relative_error {
            report = GradientReport {
                max_relative_error: rel,
                worst_parameter_index: idx,
                analytic: a,
                numeric,
            };
            first = false;
        }
    }
    Ok(report)
}
