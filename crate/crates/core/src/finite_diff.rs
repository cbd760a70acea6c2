//! Central-difference gradients, used as the independent oracle for the
//! reverse-mode engine.
//!
//! The point of this module is to be *boring*: it never touches the graph
//! machinery, so agreement between the two is meaningful evidence that the
//! analytic gradients are right.

use crate::scalar::Scalar;

/// Step size and comparison tolerances for finite-difference checks.
#[derive(Debug, Clone)]
pub struct FiniteDiffConfig {
    /// Perturbation step per coordinate.
    pub step: f64,
    /// Relative tolerance used by [`check_gradient`].
    pub rel_tolerance: f64,
    /// Absolute floor below which relative error is ignored.
    pub abs_tolerance: f64,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        // sqrt-of-epsilon-ish step balances truncation against cancellation
        // for central differences on O(1) inputs.
        FiniteDiffConfig {
            step: 1e-5,
            rel_tolerance: 1e-4,
            abs_tolerance: 1e-8,
        }
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_difference_gradient<S, F>(f: &F, x: &[S], config: &FiniteDiffConfig) -> Vec<S>
where
    S: Scalar,
    F: Fn(&[S]) -> S,
{
    let h = S::from_f64_lit(config.step);
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        grad.push((plus - minus) / two_h);
    }
    grad
}

/// Worst relative disagreement between an analytic gradient and the
/// central-difference estimate, along with the offending coordinate.
///
/// Relative error uses `max(|analytic|, |numeric|, abs_tolerance)` as the
/// denominator so near-zero coordinates don't blow up the ratio.
pub fn gradient_disagreement<S, F>(
    f: &F,
    x: &[S],
    analytic: &[S],
    config: &FiniteDiffConfig,
) -> (f64, usize)
where
    S: Scalar,
    F: Fn(&[S]) -> S,
{
    assert_eq!(
        analytic.len(),
        x.len(),
        "analytic gradient length must match input length"
    );
    let numeric = finite_difference_gradient(f, x, config);
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let a = analytic[i].to_f64().unwrap_or(f64::NAN);
        let n = numeric[i].to_f64().unwrap_or(f64::NAN);
        let denom = a.abs().max(n.abs()).max(config.abs_tolerance);
        let rel = (a - n).abs() / denom;
        if rel > worst.0 || !rel.is_finite() {
            worst = (rel, i);
        }
    }
    worst
}

/// Checks an analytic gradient against central differences.
///
/// Returns `Ok(worst_relative_error)` or an error message naming the first
/// coordinate that exceeds the tolerance.
pub fn check_gradient<S, F>(
    f: &F,
    x: &[S],
    analytic: &[S],
    config: &FiniteDiffConfig,
) -> Result<f64, String>
where
    S: Scalar,
    F: Fn(&[S]) -> S,
{
    let (worst, coord) = gradient_disagreement(f, x, analytic, config);
    if worst <= config.rel_tolerance {
        Ok(worst)
    } else {
        Err(format!(
            "gradient check failed at coordinate {coord}: relative error {worst:.3e} exceeds {:.3e}",
            config.rel_tolerance
        ))
    }
}
