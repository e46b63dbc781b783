use super::Dense;
use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// The result is `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Dense, step: f64) -> Result<f64>
where
    F: Fn(&Dense) -> Result<(f64, Dense)>,
{
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("finite_diff_check value".into()));
    }
    if analytic.dims() != x.dims() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("gradient {:?} vs input {:?}", analytic.dims(), x.dims()),
        ));
    }
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_check at coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
