use super::ParamSet;
use crate::error::{Error, Result};

/// A scalar loss over a parameter set with an analytic gradient.
pub trait Objective {
    type Params: ParamSet;

    fn loss(&self, params: &Self::Params) -> Result<f64>;

    fn loss_and_grad(&self, params: &Self::Params) -> Result<(f64, Self::Params)>;
}

/// Evaluates the analytic gradient, refusing non-finite losses or gradients.
pub fn grad<O: Objective>(objective: &O, params: &O::Params) -> Result<O::Params> {
    let (loss, g) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss (parameter snapshot {})",
            params.fingerprint()
        )));
    }
    if !g.all_finite() {
        return Err(Error::Numeric(format!(
            "gradient (parameter snapshot {})",
            params.fingerprint()
        )));
    }
    Ok(g)
}

/// Central finite differences of the loss with respect to every parameter.
pub fn central_difference<O: Objective>(
    objective: &O,
    params: &O::Params,
    step: f64,
) -> Result<Vec<f64>> {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.set_flat(&flat)?;
        let up = objective.loss(&probe)?;
        flat[i] = base[i] - step;
        probe.set_flat(&flat)?;
        let down = objective.loss(&probe)?;
        flat[i] = base[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub num_params: usize,
}

/// Compares the analytic gradient against central differences. The relative
/// error of each coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradient<O: Objective>(
    objective: &O,
    params: &O::Params,
    step: f64,
    floor: f64,
) -> Result<GradCheck> {
    let analytic = grad(objective, params)?.to_flat();
    let numeric = central_difference(objective, params, step)?;
    let mut report = GradCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        num_params: analytic.len(),
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        report.max_relative_error = report.max_relative_error.max(rel);
    }
    Ok(report)
}
