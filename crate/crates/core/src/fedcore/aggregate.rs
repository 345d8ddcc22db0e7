//! Uniform averaging of client parameter vectors.
//!
//! Each coordinate's sum is accumulated exactly as a floating-point
//! expansion and divided once, so the result is the rounded true mean: it
//! does not depend on input order, and averaging identical vectors returns
//! them unchanged.

use crate::error::{Error, Result};
use crate::models::ModelSnapshot;

/// Grows `partials` (non-overlapping, increasing magnitude) by `x` exactly.
fn add_exact(partials: &mut Vec<f64>, mut x: f64) {
    let mut i = 0;
    for j in 0..partials.len() {
        let mut y = partials[j];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[i] = lo;
            i += 1;
        }
        x = hi;
    }
    partials.truncate(i);
    partials.push(x);
}

fn approx(partials: &[f64]) -> f64 {
    partials.iter().rev().sum()
}

/// Mean of `values`, from their exact sum with one correction step.
pub(crate) fn exact_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mut partials = Vec::new();
    for v in values.clone() {
        add_exact(&mut partials, v);
    }
    let q = approx(&partials) / n;
    if !q.is_finite() {
        return values.sum::<f64>() / n;
    }
    // Remainder S − q·n, with q·n split exactly into p + e.
    let p = q * n;
    let e = q.mul_add(n, -p);
    add_exact(&mut partials, -p);
    add_exact(&mut partials, -e);
    q + approx(&partials) / n
}

/// Coordinate-wise mean of the updates, ordered by client id.
pub fn aggregate(updates: &[(usize, ModelSnapshot)]) -> Result<ModelSnapshot> {
    let first = &updates.first().ok_or_else(|| Error::Data("aggregate needs at least one update".into()))?.1;
    if let Some((id, s)) = updates.iter().find(|(_, s)| s.len() != first.len()) {
        return Err(Error::shape("aggregate", (first.len(), 1), (s.len(), *id)));
    }
    if let Some((id, s)) = updates.iter().find(|(_, s)| s.method != first.method) {
        return Err(Error::Data(format!("client {id} sent a {} update, expected {}", s.method, first.method)));
    }
    let mut sorted: Vec<&(usize, ModelSnapshot)> = updates.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    if sorted.len() == 1 {
        return Ok(first.clone());
    }
    let values = (0..first.len())
        .map(|i| exact_mean(sorted.iter().map(|(_, s)| s.values[i])))
        .collect();
    Ok(ModelSnapshot::new(first.method, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Method;

    fn snap(v: &[f64]) -> ModelSnapshot {
        ModelSnapshot::new(Method::FedCoop, v.to_vec())
    }

    #[test]
    fn two_four_three() {
        let out = aggregate(&[(0, snap(&[2.0])), (1, snap(&[4.0]))]).unwrap();
        assert_eq!(out.values, vec![3.0]);
    }

    #[test]
    fn identical_thirds() {
        let s = snap(&[0.1, -1e300, 3.3e-5]);
        let ups: Vec<_> = (0..7).map(|i| (i, s.clone())).collect();
        assert!(aggregate(&ups).unwrap().bitwise_eq(&s));
    }

    #[test]
    fn cancellation_is_exact() {
        let out = aggregate(&[(0, snap(&[1e16])), (1, snap(&[1.0])), (2, snap(&[-1e16]))]).unwrap();
        assert_eq!(out.values[0], 1.0 / 3.0);
    }

    #[test]
    fn errors() {
        assert!(aggregate(&[]).is_err());
        assert!(matches!(aggregate(&[(0, snap(&[1.0])), (1, snap(&[1.0, 2.0]))]), Err(Error::Shape { .. })));
        let other = ModelSnapshot::new(Method::FedTpg, vec![1.0]);
        assert!(aggregate(&[(0, snap(&[1.0])), (1, other)]).is_err());
    }
}
