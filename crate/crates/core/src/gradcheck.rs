//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Check the gradient returned by `loss_fn` at `inputs` coordinate by
/// coordinate against `(f(x + h) - f(x - h)) / 2h`.
pub fn grad_check<F>(mut loss_fn: F, inputs: &[f64], step: f64, tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(inputs);
    compare_with_finite_differences(|x| loss_fn(x).0, inputs, &analytic, step, tolerance)
}

/// Same as [`grad_check`] when the analytic gradient is computed separately
/// and only the scalar value is cheap to re-evaluate.
pub fn compare_with_finite_differences<F>(
    mut value_fn: F,
    inputs: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "gradient length mismatch");
    let mut x = inputs.to_vec();
    let mut worst = (0.0f64, 0usize);
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let plus = value_fn(&x);
        x[k] = orig - step;
        let minus = value_fn(&x);
        x[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[k], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, k);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: x.len(),
        tolerance,
        passed: worst.0 < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let f = |x: &[f64]| {
            let v = x.iter().map(|a| a * a * a).sum::<f64>();
            (v, x.iter().map(|a| 3.0 * a * a).collect())
        };
        let r = grad_check(f, &[0.3, -1.2, 2.0], 1e-5, 1e-6);
        assert!(r.passed, "{r:?}");

        let wrong = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        let r = grad_check(wrong, &[1.5], 1e-5, 1e-4);
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }
}
