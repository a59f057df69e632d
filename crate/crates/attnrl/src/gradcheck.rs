//! Central finite-difference gradient verification.
//!
//! The numeric side only ever re-evaluates the forward closure with recording
//! disabled, so it stays independent of the tape's backward rules.

use crate::error::Result;
use crate::tensor::{tape, Tensor};

/// Central-difference gradient of `f` (scalar output) w.r.t. `param`,
/// perturbing one element at a time.
pub fn finite_diff_grad(
    param: &Tensor,
    f: &dyn Fn() -> Result<Tensor>,
    eps: f64,
) -> Result<Vec<f64>> {
    let n = param.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = param.data()[i];
        let step = eps * orig.abs().max(1.0);
        param.update_data(|d| d[i] = orig + step);
        let plus = tape::no_grad(|| f().map(|t| t.item()))?;
        param.update_data(|d| d[i] = orig - step);
        let minus = tape::no_grad(|| f().map(|t| t.item()))?;
        param.update_data(|d| d[i] = orig);
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Max relative error between two gradient vectors, with a floor on the
/// denominator so near-zero entries compare sensibly.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Run `f` once recorded, backprop, then check every listed parameter
/// against central differences. Returns the worst relative error seen.
pub fn check_grads(
    params: &[(&str, &Tensor)],
    f: &dyn Fn() -> Result<Tensor>,
    eps: f64,
    tol: f64,
) -> Result<f64> {
    tape::reset();
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let mut worst = 0.0f64;
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let numeric = finite_diff_grad(p, f, eps)?;
        let err = max_rel_err(&analytic, &numeric);
        assert!(
            err <= tol,
            "gradient check failed for `{name}`: rel err {err:.3e} > tol {tol:.1e}"
        );
        worst = worst.max(err);
    }
    Ok(worst)
}
