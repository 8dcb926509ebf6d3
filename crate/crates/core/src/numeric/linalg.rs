use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{dim_mismatch, Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const MAX_ESCALATIONS: usize = 6;

/// Cholesky factor `L` of `A + jitter·I` together with its log-determinant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdFactor {
    lower: Mat,
    log_det: f64,
    jitter: f64,
}

impl SpdFactor {
    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// `ln det(A + jitter·I)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Jitter that was finally added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L·Lᵀ`, i.e. the jittered matrix that was factored.
    pub fn reconstruct(&self) -> Mat {
        self.lower.matmul_t(&self.lower).expect("square factor")
    }

    /// Solves `L y = b` in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let l = &self.lower;
        for i in 0..b.len() {
            let row = l.row(i);
            let mut s = b[i];
            for k in 0..i {
                s -= row[k] * b[k];
            }
            b[i] = s / row[i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_solve(&self, y: &mut [f64]) {
        let l = &self.lower;
        let n = y.len();
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
    }

    /// Squared Mahalanobis norm `bᵀ (L Lᵀ)⁻¹ b`.
    pub fn mahalanobis_sq(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.forward_solve(&mut y);
        y.iter().map(|v| v * v).sum()
    }
}

fn cholesky(a: &Mat, jitter: f64) -> Option<Mat> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)] + jitter;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

fn check_symmetric(a: &Mat) -> Result<()> {
    if !a.is_square() {
        return Err(dim_mismatch(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs().max(1.0);
    if a.asymmetry() > SYMMETRY_TOL * scale {
        return Err(dim_mismatch("matrix is not symmetric"));
    }
    Ok(())
}

/// Cholesky factorisation of `a + jitter·I` with jitter escalation.
///
/// On failure the jitter is multiplied by 10 up to six times. A zero initial
/// jitter escalates from `1e-9·trace(a)/d` instead.
pub fn spd_factor(a: &Mat, jitter: f64) -> Result<SpdFactor> {
    check_symmetric(a)?;
    let n = a.rows();
    if n == 0 {
        return Ok(SpdFactor {
            lower: Mat::zeros(0, 0),
            log_det: 0.0,
            jitter,
        });
    }
    let mut attempts = vec![jitter];
    let start = if jitter > 0.0 {
        jitter * 10.0
    } else {
        let base = 1e-9 * a.trace() / n as f64;
        if base > 0.0 {
            base
        } else {
            1e-9
        }
    };
    let mut j = start;
    for _ in 0..MAX_ESCALATIONS {
        attempts.push(j);
        j *= 10.0;
    }
    let mut last = jitter;
    for jit in attempts {
        last = jit;
        if let Some(lower) = cholesky(a, jit) {
            let log_det = 2.0 * (0..n).map(|i| lower[(i, i)].ln()).sum::<f64>();
            return Ok(SpdFactor {
                lower,
                log_det,
                jitter: jit,
            });
        }
    }
    Err(Error::NotSpd { jitter: last })
}

/// Solves `(A + jitter·I) x = b` using a precomputed factor.
pub fn spd_solve(f: &SpdFactor, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != f.dim() {
        return Err(dim_mismatch(format!(
            "factor of dimension {} against vector of length {}",
            f.dim(),
            b.len()
        )));
    }
    let mut x = b.to_vec();
    f.forward_solve(&mut x);
    f.backward_solve(&mut x);
    Ok(x)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Mat,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigenvalue iteration.
pub fn sym_eigen(a: &Mat) -> Result<SymEigen> {
    check_symmetric(a)?;
    let n = a.rows();
    // symmetrise so round-off in the input cannot bias the rotations
    let mut m = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Mat::identity(n);
    let total = m.frobenius_norm();
    let mut converged = n < 2 || total == 0.0;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
        }
        converged = off.sqrt() <= 1e-15 * total;
    }
    if !converged {
        return Err(Error::NoConverge(sweep));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen { values, vectors })
}

/// Gauss–Hermite nodes and weights for `∫ f(x) exp(−x²) dx` (Golub–Welsch).
pub fn gauss_hermite(nodes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let jacobi = Mat::from_fn(nodes, nodes, |i, j| {
        if j == i + 1 {
            (j as f64 / 2.0).sqrt()
        } else if i == j + 1 {
            (i as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = sym_eigen(&jacobi)?;
    let mu0 = std::f64::consts::PI.sqrt();
    let weights = (0..nodes)
        .map(|k| mu0 * eig.vectors[(0, k)] * eig.vectors[(0, k)])
        .collect();
    Ok((eig.values, weights))
}
