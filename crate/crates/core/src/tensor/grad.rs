use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)` where
/// `fd_i = (f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
pub fn grad_check<F>(f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    if theta.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            format!("θ has {} entries, gradient {}", theta.len(), analytic.len()),
        ));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
