use serde::{Deserialize, Serialize};

use super::ScoreFunction;
use crate::error::{dim_mismatch, Error, Result};
use crate::numeric::{spd_factor, spd_solve, tree_sum, Mat, RngStream, SpdFactor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(μ, Σ)` with a cached Cholesky factor of `Σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRecord", into = "GaussianRecord")]
pub struct GaussianModel {
    mean: Vec<f64>,
    cov: Mat,
    factor: SpdFactor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRecord {
    mean: Vec<f64>,
    cov: Mat,
}

impl TryFrom<GaussianRecord> for GaussianModel {
    type Error = Error;

    fn try_from(r: GaussianRecord) -> Result<Self> {
        GaussianModel::new(r.mean, r.cov)
    }
}

impl From<GaussianModel> for GaussianRecord {
    fn from(m: GaussianModel) -> Self {
        GaussianRecord {
            mean: m.mean,
            cov: m.cov,
        }
    }
}

impl GaussianModel {
    /// Factors `cov`; any jitter needed for the factorisation is folded into
    /// the stored covariance so that score and density stay consistent.
    pub fn new(mean: Vec<f64>, cov: Mat) -> Result<Self> {
        if cov.rows() != mean.len() || !cov.is_square() {
            return Err(dim_mismatch(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        let factor = spd_factor(&cov, 0.0)?;
        let mut cov = cov;
        if factor.jitter() > 0.0 {
            for i in 0..cov.rows() {
                cov[(i, i)] += factor.jitter();
            }
        }
        Ok(GaussianModel { mean, cov, factor })
    }

    pub fn standard(d: usize) -> Self {
        GaussianModel::new(vec![0.0; d], Mat::identity(d)).expect("identity is SPD")
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.cov
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let d = self.dim() as f64;
        Ok(-0.5 * (d * LN_2PI + self.factor.log_det() + self.factor.mahalanobis_sq(&diff)))
    }

    /// Draws `n` rows `μ + Lε`.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Mat {
        let d = self.dim();
        let l = self.factor.lower();
        let mut out = Mat::zeros(n, d);
        for r in 0..n {
            let eps = rng.normal_vec(d);
            let row = out.row_mut(r);
            for i in 0..d {
                let li = l.row(i);
                row[i] = self.mean[i] + (0..=i).map(|k| li[k] * eps[k]).sum::<f64>();
            }
        }
        out
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(dim_mismatch(format!(
                "point of length {} for a {}-dimensional model",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl ScoreFunction for GaussianModel {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut x = spd_solve(&self.factor, &diff).expect("dimension checked by caller");
        for v in &mut x {
            *v = -*v;
        }
        x
    }

    fn score_vjp(&self, _z: &[f64], v: &[f64]) -> Vec<f64> {
        let mut x = spd_solve(&self.factor, v).expect("dimension checked by caller");
        for e in &mut x {
            *e = -*e;
        }
        x
    }
}

/// Sample mean and `1/m` sample covariance, the root of the moment
/// estimating equations.
pub fn fit_gaussian(z: &Mat) -> Result<GaussianModel> {
    let (m, d) = z.shape();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let mean = z.col_means();
    let mut cov = Mat::zeros(d, d);
    let mut prods = vec![0.0; m];
    for i in 0..d {
        for j in i..d {
            for (r, p) in prods.iter_mut().enumerate() {
                let row = z.row(r);
                *p = (row[i] - mean[i]) * (row[j] - mean[j]);
            }
            let v = tree_sum(&prods) / m as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    GaussianModel::new(mean, cov)
}

/// `−Σ⁻¹(z − μ)`.
pub fn gaussian_score(model: &GaussianModel, z: &[f64]) -> Result<Vec<f64>> {
    model.check(z)?;
    Ok(model.score(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, rel_err};

    #[test]
    fn two_point_moments() {
        let z = Mat::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let g = fit_gaussian(&z).unwrap();
        assert_eq!(g.mean(), &[1.0, 1.0]);
        let j = g.factor().jitter();
        assert!(j > 0.0 && j < 1e-6);
        assert_eq!(g.cov()[(0, 1)], 1.0);
        assert_eq!(g.cov()[(0, 0)], 1.0 + j);
    }

    #[test]
    fn large_sample_moments() {
        let m = 10_000;
        let z = RngStream::new(12).normal_mat(m, 3);
        let g = fit_gaussian(&z).unwrap();
        for &mu in g.mean() {
            assert!(mu.abs() <= 4.0 / (m as f64).sqrt());
        }
        assert!(g.cov().sub(&Mat::identity(3)).unwrap().max_abs() <= 0.1);
    }

    #[test]
    fn constant_data_gets_floor() {
        let z = Mat::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let g = fit_gaussian(&z).unwrap();
        let j = g.factor().jitter();
        assert!(j > 0.0);
        assert_eq!(g.cov(), &Mat::from_diag(&[j, j]));
        assert!(matches!(
            fit_gaussian(&Mat::from_rows(&[[1.0]]).unwrap()),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn score_closed_forms() {
        let g = GaussianModel::standard(2);
        assert_eq!(gaussian_score(&g, &[0.0, 0.0]).unwrap(), vec![-0.0, -0.0]);
        assert_eq!(gaussian_score(&g, &[2.0, -1.0]).unwrap(), vec![-2.0, 1.0]);
        let shifted = GaussianModel::new(vec![1.0, 3.0], Mat::from_diag(&[2.0, 0.5])).unwrap();
        assert_eq!(gaussian_score(&shifted, &[1.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(gaussian_score(&g, &[1.0]).is_err());
        assert!((g.log_density(&[0.0, 0.0]).unwrap() + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn score_matches_log_density_gradient() {
        let mut rng = RngStream::new(13);
        let a = rng.normal_mat(4, 4);
        let mut cov = a.matmul_t(&a).unwrap();
        for i in 0..4 {
            cov[(i, i)] += 0.5;
        }
        let g = GaussianModel::new(rng.normal_vec(4), cov).unwrap();
        for _ in 0..20 {
            let z = rng.normal_vec(4);
            let s = gaussian_score(&g, &z).unwrap();
            let fd = finite_diff_grad(|p| g.log_density(p).unwrap(), &z, 1e-5).unwrap();
            for (a, b) in s.iter().zip(&fd) {
                assert!(rel_err(*a, *b, 1e-3) <= 1e-7, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn serde_round_trip() {
        let g = fit_gaussian(&RngStream::new(1).normal_mat(20, 2)).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<GaussianModel>(&json).unwrap(), g);
    }

    #[test]
    fn sampling_recovers_moments() {
        let g = GaussianModel::new(vec![1.0, -2.0], Mat::from_rows(&[[2.0, 0.6], [0.6, 1.0]]).unwrap()).unwrap();
        let z = g.sample(50_000, &mut RngStream::new(3));
        let fit = fit_gaussian(&z).unwrap();
        assert!((fit.mean()[0] - 1.0).abs() < 0.03 && (fit.mean()[1] + 2.0).abs() < 0.03);
        assert!(fit.cov().sub(g.cov()).unwrap().max_abs() < 0.05);
    }
}
