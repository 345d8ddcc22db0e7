//! Central finite differences, used as an independent check on tape gradients.

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Param(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe)?;
        probe[i] = theta[i] - h;
        let down = f(&probe)?;
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = finite_diff_grad(|t| Ok(t[0] * t[0]), &[3.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant() {
        let g = finite_diff_grad(|_| Ok(4.2), &[1.0, -2.0, 0.5], DEFAULT_STEP).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn non_finite_objective() {
        let r = finite_diff_grad(|t| Ok(1.0 / t[0]), &[0.0], 1.0);
        assert!(r.is_ok());
        let r = finite_diff_grad(|t| Ok((t[0] - 1.0).ln()), &[1.0], 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn bad_step() {
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }
}
