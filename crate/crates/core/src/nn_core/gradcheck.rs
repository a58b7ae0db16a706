use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// Returns the largest `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
/// `theta` is restored to its original values before returning.
pub fn grad_check<F>(mut f: F, theta: &mut [f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::InvalidArgument(format!(
            "analytic gradient has {} entries, parameters have {}",
            analytic.len(),
            theta.len()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = f(theta);
        theta[i] = orig - eps;
        let minus = f(theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteProbe { index: i });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}
