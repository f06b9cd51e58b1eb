//! Central finite differences for verifying analytic gradients.
//!
//! These helpers evaluate the function under test only through plain forward
//! evaluations, so they stay independent of the backward rules they check.

use super::Tensor;

/// Step used by the gradient checks throughout the crate.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively:
/// central differences at `FD_STEP` carry roughly `1e-10` of rounding and
/// truncation noise, which would dominate a relative error on a near-zero
/// derivative.
pub const REL_FLOOR: f64 = 1e-5;

/// Central-difference gradient of the scalar function `f` at `x`.
pub fn numerical_grad(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error over paired gradient components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Panics with the worst offending component when the gradients disagree.
pub fn assert_grads_match(analytic: &[f64], numeric: &[f64], rtol: f64) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        assert!(
            err <= rtol,
            "component {i}: analytic {a:e} vs numeric {n:e} (relative error {err:e} > {rtol:e})"
        );
    }
}
