//! Finite-difference verification of analytic gradients.
//!
//! Central differences in double precision are accurate to roughly the step
//! size squared, so a step of 1e-5 resolves relative errors well below the
//! 1e-5 and 1e-4 thresholds used by the module tests and the command-line
//! gate.

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor in the relative-error denominator, guarding near-zero gradients.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `loss` with respect to `params`.
///
/// Each coordinate is perturbed by `±step` in turn; `params` is restored to
/// its original contents before returning.
pub fn central_difference<F>(params: &mut [f64], step: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let original = params[i];
        params[i] = original + step;
        let plus = loss(params);
        params[i] = original - step;
        let minus = loss(params);
        params[i] = original;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Relative error `|a − n| / max(|a|, |n|, floor)` for one coordinate pair.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Maximum [`relative_error`] over paired gradient slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient slices must pair up"
    );
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
