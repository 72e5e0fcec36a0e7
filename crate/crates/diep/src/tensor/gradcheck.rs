//! Central finite differences — the numeric oracle used by the test suites.
//!
//! Kept independent of the tape's reverse pass: it only requires a loss
//! function evaluated at perturbed parameter values.

use super::Tensor;

/// Central-difference gradient of `loss` with respect to every element of
/// `at`, using the given step. The error of the estimate is O(step^2).
pub fn finite_diff<F>(mut loss: F, at: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = at.clone();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = loss(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = loss(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Tensor::new(at.shape().to_vec(), grad).expect("gradient shape matches input")
}

/// Scalar convenience wrapper.
pub fn finite_diff_scalar<F>(mut loss: F, at: f64, step: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    (loss(at + step) - loss(at - step)) / (2.0 * step)
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Elementwise comparison: passes when
/// `|a - n| <= atol + rtol * max(|a|, |n|)` for every element.
pub fn grad_close(analytic: &Tensor, numeric: &Tensor, rtol: f64, atol: f64) -> GradCheckReport {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut report = GradCheckReport {
        max_abs_diff: 0.0,
        max_rel_diff: 0.0,
        worst_index: 0,
        pass: true,
    };
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data().iter()).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if diff > report.max_abs_diff {
            report.max_abs_diff = diff;
            report.worst_index = i;
        }
        report.max_rel_diff = report.max_rel_diff.max(rel);
        if diff > atol + rtol * scale {
            report.pass = false;
        }
    }
    report
}
