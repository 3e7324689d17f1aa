//! Central finite-difference gradient checking (64-bit).
//!
//! Relative error per coordinate is `|analytic − numeric| / max(1, |analytic|)`.
//! Coordinates where the one-sided differences disagree by more than
//! `sqrt(eps)` (relative) sit on a kink, e.g. a ReLU at zero, and are skipped.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter index, coordinate)` pairs excluded as non-differentiable.
    pub skipped: Vec<(usize, usize)>,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be in [1e-8, 1e-3], got {eps}"
        )));
    }
    Ok(())
}

fn scalar_value(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_check: function output must be scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Checks `f` at `point` over every coordinate.
pub fn finite_diff_check(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    point: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheck> {
    let x = Tensor::parameter(point.shape(), point.to_vec())?;
    finite_diff_check_params(std::slice::from_ref(&x), || f(&x), eps, usize::MAX)
}

/// Checks the gradient of `loss` with respect to each of `params`, probing
/// at most `max_coords` evenly spaced coordinates per parameter.
///
/// Parameter values are restored afterwards; gradients are left populated
/// with the analytic result.
pub fn finite_diff_check_params(
    params: &[Tensor<f64>],
    mut loss: impl FnMut() -> Result<Tensor<f64>>,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheck> {
    check_eps(eps)?;
    params.iter().for_each(Tensor::zero_grad);
    let out = loss()?;
    scalar_value(&out)?;
    out.backward()?;
    drop(out);

    let mut report = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };
    let mut eval = |p: &Tensor<f64>, i: usize, v: f64| -> Result<f64> {
        p.update_data(|d| d[i] = v)?;
        let out = loss()?;
        scalar_value(&out)
    };

    for (pi, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let n = p.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = p.data()[i];
            let f0 = eval(p, i, x0)?;
            let fp = eval(p, i, x0 + eps)?;
            let fm = eval(p, i, x0 - eps)?;
            p.update_data(|d| d[i] = x0)?;

            let forward = (fp - f0) / eps;
            let backward = (f0 - fm) / eps;
            let scale = 1f64.max(forward.abs()).max(backward.abs());
            if (forward - backward).abs() > eps.sqrt() * scale {
                report.skipped.push((pi, i));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / 1f64.max(analytic[i].abs());
            report.max_relative_error = report.max_relative_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
