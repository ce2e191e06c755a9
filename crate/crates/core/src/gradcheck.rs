//! Central finite-difference gradient checks.

use serde::{Deserialize, Serialize};

use crate::engine::Mode;
use crate::error::Result;
use crate::modeling::{Batch, Mlp};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn central_diff(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max |a − fd| / (|fd| + 1e-12)`.
pub fn max_rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / (f.abs() + 1e-12))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params: usize,
    pub max_rel_error: f64,
}

/// Compare `grad(x)` against central differences of `loss`.
pub fn check(
    loss: impl FnMut(&[f64]) -> Result<f64>,
    grad: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    h: f64,
) -> Result<GradcheckReport> {
    let analytic = grad(x)?;
    let fd = central_diff(loss, x, h)?;
    Ok(GradcheckReport {
        params: x.len(),
        max_rel_error: max_rel_error(&analytic, &fd),
    })
}

/// Gradcheck every MLP parameter, analytic gradients from `mode`.
pub fn check_mlp(model: &Mlp, mode: Mode, batch: &Batch, h: f64) -> Result<GradcheckReport> {
    let x = model.params_flat();
    let mut probe = model.clone();
    check(
        |p| {
            probe.set_params_flat(p)?;
            probe.loss(batch)
        },
        |_| Ok(model.pass(mode, batch)?.grads.concat()),
        &x,
        h,
    )
}
