//! Target-distribution models exposing `s_q(z) = ∇_z ln q(z)`.

mod gaussian;
mod gmm;
mod vae;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use gaussian::{fit_gaussian, gaussian_score, GaussianModel};
pub use gmm::{
    fit_gmm_em, gmm_log_likelihood_gradient, gmm_responsibilities, gmm_score, gmm_sgd_step, GmmFit,
    GmmGradient, GmmModel, VARIANCE_CEILING, VARIANCE_FLOOR,
};
pub use vae::{
    reconstruction_log_likelihood, vae_elbo_step, vae_score, FrozenVaeScore, VaeGradients, VaeModel,
    VaeScoreVariant, DEFAULT_MC_SAMPLES,
};

use crate::error::{Error, Result};
use crate::numeric::{Mat, RngStream};

/// A deterministic score function and its vector-Jacobian product.
///
/// Callers validate dimensions; implementations may panic on mismatched input.
pub trait ScoreFunction {
    fn dim(&self) -> usize;

    fn score(&self, z: &[f64]) -> Vec<f64>;

    /// `∇_z (s(z) · v)`, i.e. `Hᵀv` for the score Jacobian `H`.
    fn score_vjp(&self, z: &[f64], v: &[f64]) -> Vec<f64>;

    fn score_batch(&self, x: &Mat) -> Mat {
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| self.score(r)).collect();
        Mat::from_rows(&rows).unwrap_or_else(|_| Mat::zeros(0, self.dim()))
    }

    fn score_vjp_batch(&self, x: &Mat, v: &Mat) -> Mat {
        let rows: Vec<Vec<f64>> = x
            .row_iter()
            .zip(v.row_iter())
            .map(|(z, w)| self.score_vjp(z, w))
            .collect();
        Mat::from_rows(&rows).unwrap_or_else(|_| Mat::zeros(0, self.dim()))
    }
}

impl<T: ScoreFunction + ?Sized> ScoreFunction for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        (**self).score(z)
    }

    fn score_vjp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        (**self).score_vjp(z, v)
    }

    fn score_batch(&self, x: &Mat) -> Mat {
        (**self).score_batch(x)
    }

    fn score_vjp_batch(&self, x: &Mat, v: &Mat) -> Mat {
        (**self).score_vjp_batch(x, v)
    }
}

/// One of the supported target models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum ScoreModel {
    Gaussian(GaussianModel),
    Gmm(GmmModel),
    Vae(VaeModel),
}

impl ScoreModel {
    pub fn family(&self) -> ScoreFamily {
        match self {
            ScoreModel::Gaussian(_) => ScoreFamily::Gaussian,
            ScoreModel::Gmm(_) => ScoreFamily::Gmm,
            ScoreModel::Vae(_) => ScoreFamily::Vae,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreModel::Gaussian(m) => m.dim(),
            ScoreModel::Gmm(m) => m.dim(),
            ScoreModel::Vae(m) => m.dim(),
        }
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        match self {
            ScoreModel::Gaussian(m) => m.log_density(z),
            ScoreModel::Gmm(m) => m.log_density(z),
            ScoreModel::Vae(_) => Err(Error::UnsupportedVariant("log-density of a VAE")),
        }
    }

    /// Draws `n` rows from the model. A VAE samples `𝐃(ξ) + ε` with `ξ ~ N(0, I)`.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Mat> {
        match self {
            ScoreModel::Gaussian(m) => Ok(m.sample(n, rng)),
            ScoreModel::Gmm(m) => Ok(m.sample(n, rng)),
            ScoreModel::Vae(m) => {
                let xi = rng.normal_mat(n, m.latent_dim());
                let mut out = m.decoder().forward(&xi)?;
                for v in out.data_mut() {
                    *v += rng.normal();
                }
                Ok(out)
            }
        }
    }

    /// Deterministic score function. Exact models are unaffected by `rng`;
    /// a VAE draws its latent noise table from it.
    pub fn freeze(&self, rng: &mut RngStream) -> FrozenScore {
        match self {
            ScoreModel::Gaussian(m) => FrozenScore::Gaussian(m.clone()),
            ScoreModel::Gmm(m) => FrozenScore::Gmm(m.clone()),
            ScoreModel::Vae(m) => FrozenScore::Vae(m.freeze(rng)),
        }
    }
}

/// [`ScoreModel`] with any Monte-Carlo noise fixed.
#[derive(Clone, Debug)]
pub enum FrozenScore {
    Gaussian(GaussianModel),
    Gmm(GmmModel),
    Vae(FrozenVaeScore),
}

impl ScoreFunction for FrozenScore {
    fn dim(&self) -> usize {
        match self {
            FrozenScore::Gaussian(m) => ScoreFunction::dim(m),
            FrozenScore::Gmm(m) => ScoreFunction::dim(m),
            FrozenScore::Vae(m) => m.dim(),
        }
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        match self {
            FrozenScore::Gaussian(m) => m.score(z),
            FrozenScore::Gmm(m) => m.score(z),
            FrozenScore::Vae(m) => m.score(z),
        }
    }

    fn score_vjp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            FrozenScore::Gaussian(m) => m.score_vjp(z, v),
            FrozenScore::Gmm(m) => m.score_vjp(z, v),
            FrozenScore::Vae(m) => m.score_vjp(z, v),
        }
    }

    fn score_batch(&self, x: &Mat) -> Mat {
        match self {
            FrozenScore::Gaussian(m) => m.score_batch(x),
            FrozenScore::Gmm(m) => m.score_batch(x),
            FrozenScore::Vae(m) => m.score_batch(x),
        }
    }

    fn score_vjp_batch(&self, x: &Mat, v: &Mat) -> Mat {
        match self {
            FrozenScore::Gaussian(m) => m.score_vjp_batch(x, v),
            FrozenScore::Gmm(m) => m.score_vjp_batch(x, v),
            FrozenScore::Vae(m) => m.score_vjp_batch(x, v),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFamily {
    #[default]
    Gaussian,
    Gmm,
    Vae,
}

impl fmt::Display for ScoreFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreFamily::Gaussian => "gaussian",
            ScoreFamily::Gmm => "gmm",
            ScoreFamily::Vae => "vae",
        })
    }
}

impl FromStr for ScoreFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ScoreFamily::Gaussian),
            "gmm" => Ok(ScoreFamily::Gmm),
            "vae" => Ok(ScoreFamily::Vae),
            other => Err(Error::Parse(format!("unknown score family '{other}'"))),
        }
    }
}

/// Hyperparameters for fitting any [`ScoreFamily`] from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreFitParams {
    pub components: usize,
    pub em_iters: usize,
    pub latent_dim: usize,
    pub vae_hidden: usize,
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub mc_samples: usize,
    pub vae_variant: VaeScoreVariant,
}

impl Default for ScoreFitParams {
    fn default() -> Self {
        ScoreFitParams {
            components: 4,
            em_iters: 50,
            latent_dim: 2,
            vae_hidden: 16,
            vae_steps: 200,
            vae_lr: 0.01,
            mc_samples: DEFAULT_MC_SAMPLES,
            vae_variant: VaeScoreVariant::Corrected,
        }
    }
}

/// Fits a model of the given family to the rows of `z`.
pub fn fit_score_model(family: ScoreFamily, z: &Mat, params: &ScoreFitParams, rng: &mut RngStream) -> Result<ScoreModel> {
    match family {
        ScoreFamily::Gaussian => Ok(ScoreModel::Gaussian(fit_gaussian(z)?)),
        ScoreFamily::Gmm => Ok(ScoreModel::Gmm(fit_gmm_em(z, params.components, params.em_iters, rng)?.model)),
        ScoreFamily::Vae => {
            if z.rows() == 0 {
                return Err(Error::EmptyDataset);
            }
            let mut vae = VaeModel::new(z.cols(), params.vae_hidden, params.latent_dim, &rng.fork())?
                .with_variant(params.vae_variant)
                .with_mc_samples(params.mc_samples)?;
            for _ in 0..params.vae_steps {
                vae = vae_elbo_step(&vae, z, params.vae_lr, rng)?.0;
            }
            Ok(ScoreModel::Vae(vae))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vae_has_no_log_density() {
        let vae = VaeModel::new(2, 3, 1, &RngStream::new(0)).unwrap();
        assert!(matches!(
            ScoreModel::Vae(vae).log_density(&[0.0, 0.0]),
            Err(Error::UnsupportedVariant(_))
        ));
        let g = ScoreModel::Gaussian(GaussianModel::standard(2));
        assert!((g.log_density(&[0.0, 0.0]).unwrap() + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn tagged_json_round_trip() {
        let mut rng = RngStream::new(1);
        let models = vec![
            ScoreModel::Gaussian(GaussianModel::standard(2)),
            fit_score_model(ScoreFamily::Gmm, &rng.normal_mat(30, 2), &ScoreFitParams::default(), &mut rng).unwrap(),
            ScoreModel::Vae(VaeModel::new(2, 3, 1, &rng.fork()).unwrap()),
        ];
        for m in models {
            let json = serde_json::to_string(&m).unwrap();
            assert!(json.contains(&format!("\"variant\":\"{}\"", m.family())));
            assert_eq!(serde_json::from_str::<ScoreModel>(&json).unwrap(), m);
        }
    }

    #[test]
    fn frozen_exact_models_ignore_rng() {
        let g = ScoreModel::Gaussian(GaussianModel::standard(2));
        let a = g.freeze(&mut RngStream::new(0)).score(&[1.0, 2.0]);
        let b = g.freeze(&mut RngStream::new(99)).score(&[1.0, 2.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn stein_identity_for_exact_scores() {
        // mean of s(x)·f(x) + ∇·f(x) vanishes under x ~ q for smooth f
        let mut rng = RngStream::new(2);
        let gmm = fit_gmm_em(&rng.normal_mat(200, 2), 3, 50, &mut rng).unwrap().model;
        let models = [ScoreModel::Gaussian(fit_gaussian(&rng.normal_mat(50, 2)).unwrap()), ScoreModel::Gmm(gmm)];
        for model in &models {
            let frozen = model.freeze(&mut rng);
            let x = model.sample(10_000, &mut rng).unwrap();
            let s = frozen.score_batch(&x);
            for _ in 0..5 {
                let (w, b) = (rng.normal_vec(2), rng.normal());
                // f(x) = tanh(w·x + b)·e₀, ∇·f = w₀·(1 − tanh²)
                let vals: Vec<f64> = (0..x.rows())
                    .map(|i| {
                        let t = (w[0] * x[(i, 0)] + w[1] * x[(i, 1)] + b).tanh();
                        t * s[(i, 0)] + w[0] * (1.0 - t * t)
                    })
                    .collect();
                let (mean, var) = crate::numeric::mean_var(&vals);
                let se = (var / vals.len() as f64).sqrt();
                assert!(mean.abs() <= 3.0 * se, "{mean} vs se {se}");
            }
        }
    }
}
