use crate::error::{Error, Result};

/// Central-difference gradient estimate of `f` at `params`:
/// `(f(p + eps·eᵢ) − f(p − eps·eᵢ)) / (2·eps)` per coordinate.
pub fn finite_diff<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p);
        p[i] = orig - eps;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error between two gradients.
///
/// Each coordinate is measured as `|a − n| / max(|a|, |n|, floor)` with
/// `floor = 1e-3 · max_j |n_j|`, so coordinates that are negligible next to
/// the largest gradient entry are judged on the gradient's own scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = numeric.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let g = finite_diff(|p| p.iter().sum(), &[0.3, -2.0, 7.5], 1e-3).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_squared_norm_is_exact_for_central_differences() {
        let g = finite_diff(|p| 0.5 * p.iter().map(|x| x * x).sum::<f64>(), &[1.0, 2.0], 1e-3)
            .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let r = finite_diff(|p| if p[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-3);
        assert!(r.is_err());
    }

    #[test]
    fn relative_error_uses_scale_floor() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        // 1e-9 absolute error on a coordinate far below the 1e-3 floor
        let e = max_relative_error(&[1.0, 1e-9], &[1.0, 0.0]);
        assert!(e < 1e-5);
        assert!((max_relative_error(&[1.1], &[1.0]) - 0.1 / 1.1).abs() < 1e-12);
    }
}
