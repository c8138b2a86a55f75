use alloc::vec::Vec;

use crate::error::value_err;
use crate::Result;

/// Compares an analytic gradient with central differences.
///
/// `f` returns the function value and its analytic gradient at the given
/// parameters. The result is `max_i |a_i − c_i| / (|a_i| + |c_i| + 1e-12)`
/// where `c_i = (f(p + eps e_i) − f(p − eps e_i)) / (2 eps)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0) {
        return Err(value_err!("finite-difference step must be positive"));
    }
    let (value, analytic) = f(params);
    if !value.is_finite() {
        return Err(value_err!("function value is not finite"));
    }
    if analytic.len() != params.len() {
        return Err(value_err!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        ));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p).0;
        p[i] = orig - eps;
        let down = f(&p).0;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(value_err!("function value is not finite near parameter {i}"));
        }
        let central = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
