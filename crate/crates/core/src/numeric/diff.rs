use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteEval(i));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_is_zero() {
        let g = finite_diff_grad(|_| 3.5, &[0.1, 0.2, 0.3], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn gaussian_log_density_gradient_is_score() {
        let logp = |x: &[f64]| {
            -(2.0 * std::f64::consts::PI).ln() - 0.5 * (x[0] * x[0] + x[1] * x[1])
        };
        let g = finite_diff_grad(logp, &[0.3, -0.7], 1e-5).unwrap();
        assert!((g[0] + 0.3).abs() < 1e-7 && (g[1] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn non_finite_is_reported() {
        let r = finite_diff_grad(|x| if x[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFiniteEval(1))));
    }
}
