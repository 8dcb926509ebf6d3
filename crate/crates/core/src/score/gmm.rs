use serde::{Deserialize, Serialize};

use super::ScoreFunction;
use crate::error::{dim_mismatch, Error, Result};
use crate::numeric::{sq_dist, tree_sum, Mat, RngStream};

/// Per-coordinate variance floor.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Upper bound applied by [`gmm_sgd_step`] so that oversized steps stay finite.
pub const VARIANCE_CEILING: f64 = 1e100;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EM_TOLERANCE: f64 = 1e-8;

/// Mixture of diagonal-covariance Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRecord", into = "GmmRecord")]
pub struct GmmModel {
    weights: Vec<f64>,
    /// `k × d`
    means: Mat,
    /// `k × d`
    variances: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmRecord {
    weights: Vec<f64>,
    means: Mat,
    variances: Mat,
}

impl TryFrom<GmmRecord> for GmmModel {
    type Error = Error;

    fn try_from(r: GmmRecord) -> Result<Self> {
        GmmModel::new(r.weights, r.means, r.variances)
    }
}

impl From<GmmModel> for GmmRecord {
    fn from(m: GmmModel) -> Self {
        GmmRecord {
            weights: m.weights,
            means: m.means,
            variances: m.variances,
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Mat, variances: Mat) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.rows() != k || variances.shape() != means.shape() {
            return Err(dim_mismatch(format!(
                "{k} weights with {:?} means and {:?} variances",
                means.shape(),
                variances.shape()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Parse(format!(
                "mixture weights must be positive and sum to 1 (sum = {total})"
            )));
        }
        if variances.data().iter().any(|&v| !(v >= VARIANCE_FLOOR) || !v.is_finite()) {
            return Err(Error::Parse(format!(
                "mixture variances must be finite and at least {VARIANCE_FLOOR}"
            )));
        }
        if !means.all_finite() {
            return Err(Error::Parse("mixture means must be finite".into()));
        }
        Ok(GmmModel {
            weights,
            means,
            variances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Mat {
        &self.means
    }

    pub fn variances(&self) -> &Mat {
        &self.variances
    }

    fn component_log_density(&self, i: usize, z: &[f64]) -> f64 {
        let mu = self.means.row(i);
        let var = self.variances.row(i);
        let mut acc = 0.0;
        for ((zj, mj), vj) in z.iter().zip(mu).zip(var) {
            let r = zj - mj;
            acc += LN_2PI + vj.ln() + r * r / vj;
        }
        -0.5 * acc
    }

    /// `ln w_i + ln N(z | μ_i, Σ_i)` for every component.
    fn weighted_log_densities(&self, z: &[f64]) -> Vec<f64> {
        (0..self.components())
            .map(|i| self.weights[i].ln() + self.component_log_density(i, z))
            .collect()
    }

    fn responsibilities_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let lw = self.weighted_log_densities(z);
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.iter().map(|v| v / total).collect()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        Ok(log_sum_exp(&self.weighted_log_densities(z)))
    }

    /// Mean log-likelihood of the rows of `z`.
    pub fn mean_log_likelihood(&self, z: &Mat) -> f64 {
        let ll: Vec<f64> = z
            .row_iter()
            .map(|r| log_sum_exp(&self.weighted_log_densities(r)))
            .collect();
        tree_sum(&ll) / z.rows() as f64
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Mat {
        let d = self.dim();
        let mut out = Mat::zeros(n, d);
        for r in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut comp = self.components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = i;
                    break;
                }
            }
            let row = out.row_mut(r);
            for j in 0..d {
                row[j] = self.means[(comp, j)] + self.variances[(comp, j)].sqrt() * rng.normal();
            }
        }
        out
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(dim_mismatch(format!(
                "point of length {} for a {}-dimensional mixture",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Component scores `a_i = −Σ_i⁻¹(z − μ_i)`.
    fn component_scores(&self, z: &[f64]) -> Mat {
        Mat::from_fn(self.components(), self.dim(), |i, j| {
            -(z[j] - self.means[(i, j)]) / self.variances[(i, j)]
        })
    }
}

impl ScoreFunction for GmmModel {
    fn dim(&self) -> usize {
        self.means.cols()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        let gamma = self.responsibilities_unchecked(z);
        let a = self.component_scores(z);
        let mut s = vec![0.0; self.dim()];
        for (i, g) in gamma.iter().enumerate() {
            for (sj, aij) in s.iter_mut().zip(a.row(i)) {
                *sj += g * aij;
            }
        }
        s
    }

    /// The Hessian of `ln q` is `Σᵢ γᵢ (aᵢaᵢᵀ − Σᵢ⁻¹) − s sᵀ`.
    fn score_vjp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let gamma = self.responsibilities_unchecked(z);
        let a = self.component_scores(z);
        let d = self.dim();
        let mut s = vec![0.0; d];
        let mut out = vec![0.0; d];
        for (i, g) in gamma.iter().enumerate() {
            let ai = a.row(i);
            let av: f64 = ai.iter().zip(v).map(|(x, y)| x * y).sum();
            for j in 0..d {
                s[j] += g * ai[j];
                out[j] += g * (ai[j] * av - v[j] / self.variances[(i, j)]);
            }
        }
        let sv: f64 = s.iter().zip(v).map(|(x, y)| x * y).sum();
        for j in 0..d {
            out[j] -= s[j] * sv;
        }
        out
    }
}

/// Posterior component memberships `γ_i(z)`, computed in log space.
pub fn gmm_responsibilities(model: &GmmModel, z: &[f64]) -> Result<Vec<f64>> {
    model.check(z)?;
    Ok(model.responsibilities_unchecked(z))
}

/// `−Σᵢ γᵢ(z) Σᵢ⁻¹(z − μᵢ)`.
pub fn gmm_score(model: &GmmModel, z: &[f64]) -> Result<Vec<f64>> {
    model.check(z)?;
    Ok(model.score(z))
}

/// Result of [`fit_gmm_em`].
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood at initialisation and after every iteration.
    pub log_likelihood: Vec<f64>,
}

fn kmeanspp_seeds(z: &Mat, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let m = z.rows();
    let mut seeds = vec![rng.below(m)];
    let mut d2: Vec<f64> = z.row_iter().map(|r| sq_dist(r, z.row(seeds[0]))).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(m)
        };
        seeds.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    seeds
}

/// EM for a diagonal mixture with k-means++ seeding and a variance floor.
pub fn fit_gmm_em(z: &Mat, k: usize, iters: usize, rng: &mut RngStream) -> Result<GmmFit> {
    let (m, d) = z.shape();
    if k == 0 || m < k.max(1) {
        return Err(Error::TooFewSamples { needed: k.max(1), got: m });
    }
    let seeds = kmeanspp_seeds(z, k, rng);
    let means = z.select_rows(&seeds);
    let global_mean = z.col_means();
    let global_var: Vec<f64> = (0..d)
        .map(|j| {
            let dev: Vec<f64> = z.row_iter().map(|r| (r[j] - global_mean[j]).powi(2)).collect();
            (tree_sum(&dev) / m as f64).max(VARIANCE_FLOOR)
        })
        .collect();
    let variances = Mat::from_fn(k, d, |_, j| global_var[j]);
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means,
        variances,
    };
    let mut trace = vec![model.mean_log_likelihood(z)];
    let mut gamma = Mat::zeros(m, k);
    let mut col = vec![0.0; m];
    for _ in 0..iters {
        for r in 0..m {
            let g = model.responsibilities_unchecked(z.row(r));
            gamma.row_mut(r).copy_from_slice(&g);
        }
        let mut weights = vec![0.0; k];
        let mut means = model.means.clone();
        let mut variances = model.variances.clone();
        for i in 0..k {
            for (r, c) in col.iter_mut().enumerate() {
                *c = gamma[(r, i)];
            }
            let nk = tree_sum(&col);
            if !(nk > 0.0) {
                // empty component keeps its parameters with a vanishing weight
                weights[i] = f64::MIN_POSITIVE;
                continue;
            }
            weights[i] = nk / m as f64;
            let mut buf = vec![0.0; m];
            for j in 0..d {
                for (r, b) in buf.iter_mut().enumerate() {
                    *b = col[r] * z[(r, j)];
                }
                let mu = tree_sum(&buf) / nk;
                for (r, b) in buf.iter_mut().enumerate() {
                    let dev = z[(r, j)] - mu;
                    *b = col[r] * dev * dev;
                }
                means[(i, j)] = mu;
                variances[(i, j)] = (tree_sum(&buf) / nk).max(VARIANCE_FLOOR);
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        model = GmmModel {
            weights,
            means,
            variances,
        };
        let ll = model.mean_log_likelihood(z);
        let gain = ll - trace[trace.len() - 1];
        trace.push(ll);
        if gain < EM_TOLERANCE {
            break;
        }
    }
    Ok(GmmFit {
        model,
        log_likelihood: trace,
    })
}

/// Gradient of the mean log-likelihood in the unconstrained coordinates
/// `(ln wᵢ, μᵢ, ln σᵢ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmGradient {
    pub log_weights: Vec<f64>,
    pub means: Mat,
    pub log_variances: Mat,
}

pub fn gmm_log_likelihood_gradient(model: &GmmModel, z: &Mat) -> Result<GmmGradient> {
    if z.cols() != model.dim() {
        return Err(dim_mismatch("batch dimension differs from mixture"));
    }
    let (k, d) = (model.components(), model.dim());
    let m = z.rows() as f64;
    let mut gw = vec![0.0; k];
    let mut gm = Mat::zeros(k, d);
    let mut gv = Mat::zeros(k, d);
    for r in z.row_iter() {
        let gamma = model.responsibilities_unchecked(r);
        for i in 0..k {
            let g = gamma[i];
            // softmax Jacobian: ∂/∂αᵢ ln Σ exp(αⱼ)Nⱼ = γᵢ − wᵢ
            gw[i] += (g - model.weights[i]) / m;
            for j in 0..d {
                let var = model.variances[(i, j)];
                let dev = r[j] - model.means[(i, j)];
                gm[(i, j)] += g * dev / var / m;
                gv[(i, j)] += 0.5 * g * (dev * dev / var - 1.0) / m;
            }
        }
    }
    Ok(GmmGradient {
        log_weights: gw,
        means: gm,
        log_variances: gv,
    })
}

/// One gradient-ascent step on the batch log-likelihood.
///
/// Weights move through a softmax and variances through their logarithm, so
/// the result is a valid mixture for any step size.
pub fn gmm_sgd_step(model: &GmmModel, z: &Mat, lr: f64) -> Result<GmmModel> {
    if lr == 0.0 {
        return Ok(model.clone());
    }
    let g = gmm_log_likelihood_gradient(model, z)?;
    let logits: Vec<f64> = model
        .weights
        .iter()
        .zip(&g.log_weights)
        .map(|(w, gw)| w.ln() + lr * gw)
        .collect();
    let lse = log_sum_exp(&logits);
    let mut weights: Vec<f64> = logits.iter().map(|l| (l - lse).exp().max(f64::MIN_POSITIVE)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let mut means = model.means.clone();
    for (m, gm) in means.data_mut().iter_mut().zip(g.means.data()) {
        *m += lr * gm;
    }
    let mut variances = model.variances.clone();
    for (v, gv) in variances.data_mut().iter_mut().zip(g.log_variances.data()) {
        *v = (*v * (lr * gv).exp()).clamp(VARIANCE_FLOOR, VARIANCE_CEILING);
    }
    Ok(GmmModel {
        weights,
        means,
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, rel_err};
    use crate::score::gaussian::{fit_gaussian, gaussian_score};

    pub(crate) fn random_gmm(k: usize, d: usize, rng: &mut RngStream) -> GmmModel {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        GmmModel::new(
            raw.iter().map(|w| w / total).collect(),
            Mat::from_fn(k, d, |_, _| 2.0 * rng.normal()),
            Mat::from_fn(k, d, |_, _| rng.uniform_range(0.3, 2.0)),
        )
        .unwrap()
    }

    #[test]
    fn single_component_responsibility() {
        let g = random_gmm(1, 3, &mut RngStream::new(0));
        assert_eq!(gmm_responsibilities(&g, &[0.1, 5.0, -3.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn symmetric_pair_at_midpoint() {
        let g = GmmModel::new(
            vec![0.5, 0.5],
            Mat::from_rows(&[[-2.0, 0.0], [2.0, 0.0]]).unwrap(),
            Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(gmm_responsibilities(&g, &[0.0, 0.7]).unwrap(), vec![0.5, 0.5]);
        let s = gmm_score(&g, &[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn deep_basin_responsibility() {
        let g = GmmModel::new(
            vec![0.3, 0.7],
            Mat::from_rows(&[[-5.0], [5.0]]).unwrap(),
            Mat::from_rows(&[[1.0], [1.0]]).unwrap(),
        )
        .unwrap();
        let z = [-6.0];
        let gamma = gmm_responsibilities(&g, &z).unwrap();
        // direct density ratio
        let n = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp();
        let direct = 0.3 * n(z[0], -5.0) / (0.3 * n(z[0], -5.0) + 0.7 * n(z[0], 5.0));
        assert!(gamma[0] >= 1.0 - 1e-6);
        assert!((gamma[0] - direct).abs() < 1e-15);
        // far tail where densities underflow individually
        let far = gmm_responsibilities(&g, &[-2000.0]).unwrap();
        assert_eq!(far[0], 1.0);
        assert!((far.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_component_reduces_to_gaussian() {
        let mut rng = RngStream::new(1);
        let g = random_gmm(1, 3, &mut rng);
        let gauss = crate::score::GaussianModel::new(
            g.means().row(0).to_vec(),
            Mat::from_diag(g.variances().row(0)),
        )
        .unwrap();
        for _ in 0..50 {
            let z = rng.normal_vec(3);
            let a = gmm_score(&g, &z).unwrap();
            let b = gaussian_score(&gauss, &z).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
            assert!((g.log_density(&z).unwrap() - gauss.log_density(&z).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn score_and_hessian_match_finite_differences() {
        let mut rng = RngStream::new(2);
        let g = random_gmm(3, 2, &mut rng);
        for _ in 0..30 {
            let z: Vec<f64> = rng.normal_vec(2).iter().map(|v| 2.0 * v).collect();
            let s = gmm_score(&g, &z).unwrap();
            let fd = finite_diff_grad(|p| g.log_density(p).unwrap(), &z, 1e-5).unwrap();
            for (a, b) in s.iter().zip(&fd) {
                assert!(rel_err(*a, *b, 1e-3) <= 1e-6, "{a} vs {b}");
            }
            let v = rng.normal_vec(2);
            let vjp = g.score_vjp(&z, &v);
            let fd = finite_diff_grad(
                |p| g.score(p).iter().zip(&v).map(|(a, b)| a * b).sum(),
                &z,
                1e-5,
            )
            .unwrap();
            for (a, b) in vjp.iter().zip(&fd) {
                assert!(rel_err(*a, *b, 1e-3) <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let g = GmmModel::new(
            vec![0.25, 0.75],
            Mat::from_rows(&[[-1.0], [2.0]]).unwrap(),
            Mat::from_rows(&[[0.5], [1.5]]).unwrap(),
        )
        .unwrap();
        let (lo, hi, n) = (-15.0, 18.0, 20_000);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * g.log_density(&[x]).unwrap().exp() * h;
        }
        assert!((integral - 1.0).abs() < 1e-4);
    }

    #[test]
    fn em_single_component_equals_moment_fit() {
        let z = RngStream::new(3).normal_mat(200, 3);
        let fit = fit_gmm_em(&z, 1, 50, &mut RngStream::new(4)).unwrap();
        let gauss = fit_gaussian(&z).unwrap();
        for j in 0..3 {
            assert!((fit.model.means()[(0, j)] - gauss.mean()[j]).abs() < 1e-12);
            assert!((fit.model.variances()[(0, j)] - gauss.cov()[(j, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn em_separates_clusters() {
        let mut rng = RngStream::new(5);
        let mut rows = Vec::new();
        for i in 0..400 {
            let c = if i % 2 == 0 { -5.0 } else { 5.0 };
            rows.push(vec![c + rng.normal(), c + rng.normal()]);
        }
        let z = Mat::from_rows(&rows).unwrap();
        let fit = fit_gmm_em(&z, 2, 50, &mut RngStream::new(6)).unwrap();
        let mut centers: Vec<f64> = (0..2).map(|i| fit.model.means()[(i, 0)]).collect();
        centers.sort_by(f64::total_cmp);
        assert!((centers[0] + 5.0).abs() < 0.1 && (centers[1] - 5.0).abs() < 0.1);
        for i in 0..2 {
            assert!((fit.model.means()[(i, 0)] - fit.model.means()[(i, 1)]).abs() < 0.2);
        }
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut rng = RngStream::new(7);
        for trial in 0..10 {
            let z = rng.normal_mat(60 + trial, 2);
            for k in [1, 2, 4] {
                let fit = fit_gmm_em(&z, k, 50, &mut rng).unwrap();
                for w in fit.log_likelihood.windows(2) {
                    assert!(w[1] - w[0] >= -1e-9);
                }
            }
        }
        assert!(matches!(
            fit_gmm_em(&Mat::zeros(2, 1), 3, 5, &mut rng),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn sgd_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(8);
        let g = random_gmm(3, 2, &mut rng);
        let z = rng.normal_mat(25, 2);
        let grad = gmm_log_likelihood_gradient(&g, &z).unwrap();
        let (k, d) = (3, 2);
        // unconstrained coordinates: logits, means, log-variances
        let mut theta: Vec<f64> = g.weights().iter().map(|w| w.ln()).collect();
        theta.extend_from_slice(g.means().data());
        theta.extend(g.variances().data().iter().map(|v| v.ln()));
        let objective = |t: &[f64]| {
            let lse = log_sum_exp(&t[..k]);
            let model = GmmModel {
                weights: t[..k].iter().map(|a| (a - lse).exp()).collect(),
                means: Mat::new(k, d, t[k..k + k * d].to_vec()).unwrap(),
                variances: Mat::new(k, d, t[k + k * d..].iter().map(|v| v.exp()).collect()).unwrap(),
            };
            model.mean_log_likelihood(&z)
        };
        let fd = finite_diff_grad(objective, &theta, 1e-5).unwrap();
        let mut analytic = grad.log_weights.clone();
        analytic.extend_from_slice(grad.means.data());
        analytic.extend_from_slice(grad.log_variances.data());
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(rel_err(*a, *b, 1e-3) <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn sgd_step_behaviour() {
        let mut rng = RngStream::new(9);
        let g = random_gmm(3, 2, &mut rng);
        let z = rng.normal_mat(40, 2);
        assert_eq!(gmm_sgd_step(&g, &z, 0.0).unwrap(), g);
        let before = g.mean_log_likelihood(&z);
        let after = gmm_sgd_step(&g, &z, 1e-3).unwrap();
        assert!(after.mean_log_likelihood(&z) > before);
        let total: f64 = after.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // a huge step still yields a valid mixture
        let wild = gmm_sgd_step(&g, &z, 1e3).unwrap();
        assert!(GmmModel::new(wild.weights.clone(), wild.means.clone(), wild.variances.clone()).is_ok());
    }

    #[test]
    fn serde_rejects_invalid_weights() {
        let g = random_gmm(2, 2, &mut RngStream::new(10));
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<GmmModel>(&json).unwrap(), g);
        let bad = r#"{"weights":[0.5,0.6],"means":{"rows":2,"cols":1,"data":[0,1]},"variances":{"rows":2,"cols":1,"data":[1,1]}}"#;
        assert!(serde_json::from_str::<GmmModel>(bad).is_err());
    }
}
