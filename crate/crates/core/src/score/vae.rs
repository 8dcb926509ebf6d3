use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ScoreFunction;
use crate::error::{dim_mismatch, Error, Result};
use crate::nnet::{mlp_backward, mlp_forward, Activation, Mlp, MlpGrads};
use crate::numeric::{tree_sum, Mat, RngStream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Monte-Carlo latent samples per score evaluation.
pub const DEFAULT_MC_SAMPLES: usize = 8;

/// Which Monte-Carlo integrand the score uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeScoreVariant {
    /// `𝔼[p(z|ξ)² (𝐃(ξ) − z)]`: each latent draw weighted by its squared
    /// decoder likelihood.
    SquaredLikelihood,
    /// `𝔼[𝐃(ξ) − z]`, i.e. `𝔼_{q(ξ|z)}[∇_z ln p(z|ξ)]`.
    #[default]
    Corrected,
}

impl fmt::Display for VaeScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VaeScoreVariant::SquaredLikelihood => "squared_likelihood",
            VaeScoreVariant::Corrected => "corrected",
        })
    }
}

impl FromStr for VaeScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_likelihood" => Ok(VaeScoreVariant::SquaredLikelihood),
            "corrected" => Ok(VaeScoreVariant::Corrected),
            other => Err(Error::Parse(format!("unknown VAE score variant '{other}'"))),
        }
    }
}

/// Encoder `z ↦ (μ_ξ, ln σ_ξ²)` and decoder `ξ ↦ 𝐃(ξ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VaeRecord", into = "VaeRecord")]
pub struct VaeModel {
    encoder: Mlp,
    decoder: Mlp,
    latent_dim: usize,
    variant: VaeScoreVariant,
    mc_samples: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaeRecord {
    encoder: Mlp,
    decoder: Mlp,
    latent_dim: usize,
    score_variant: VaeScoreVariant,
    mc_samples: usize,
}

impl TryFrom<VaeRecord> for VaeModel {
    type Error = Error;

    fn try_from(r: VaeRecord) -> Result<Self> {
        VaeModel::from_parts(r.encoder, r.decoder, r.latent_dim, r.score_variant, r.mc_samples)
    }
}

impl From<VaeModel> for VaeRecord {
    fn from(m: VaeModel) -> Self {
        VaeRecord {
            encoder: m.encoder,
            decoder: m.decoder,
            latent_dim: m.latent_dim,
            score_variant: m.variant,
            mc_samples: m.mc_samples,
        }
    }
}

/// Parameter gradients of the negative ELBO.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeGradients {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

impl VaeModel {
    /// `d → hidden → 2·latent` encoder and `latent → hidden → d` decoder with
    /// tanh hidden layers.
    pub fn new(dim: usize, hidden: usize, latent_dim: usize, rng: &RngStream) -> Result<Self> {
        let encoder = Mlp::new(
            &[dim, hidden, 2 * latent_dim],
            &[Activation::Tanh, Activation::Identity],
            &rng.split(0),
        )?;
        let decoder = Mlp::new(
            &[latent_dim, hidden, dim],
            &[Activation::Tanh, Activation::Identity],
            &rng.split(1),
        )?;
        VaeModel::from_parts(encoder, decoder, latent_dim, VaeScoreVariant::default(), DEFAULT_MC_SAMPLES)
    }

    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        latent_dim: usize,
        variant: VaeScoreVariant,
        mc_samples: usize,
    ) -> Result<Self> {
        if latent_dim == 0 || mc_samples == 0 {
            return Err(dim_mismatch("latent dimension and sample count must be positive"));
        }
        if encoder.output_dim() != 2 * latent_dim || decoder.input_dim() != latent_dim {
            return Err(dim_mismatch(format!(
                "encoder emits {} values and decoder reads {} for latent dimension {latent_dim}",
                encoder.output_dim(),
                decoder.input_dim()
            )));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(dim_mismatch(format!(
                "encoder reads {} features but decoder emits {}",
                encoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(VaeModel {
            encoder,
            decoder,
            latent_dim,
            variant,
            mc_samples,
        })
    }

    pub fn with_variant(mut self, variant: VaeScoreVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_mc_samples(mut self, mc_samples: usize) -> Result<Self> {
        if mc_samples == 0 {
            return Err(dim_mismatch("sample count must be positive"));
        }
        self.mc_samples = mc_samples;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn variant(&self) -> VaeScoreVariant {
        self.variant
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    /// Fixes the latent noise table, giving a deterministic score function.
    pub fn freeze(&self, rng: &mut RngStream) -> FrozenVaeScore {
        FrozenVaeScore {
            noise: rng.normal_mat(self.mc_samples, self.latent_dim),
            model: self.clone(),
        }
    }

    fn check_batch(&self, z: &Mat) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(dim_mismatch(format!(
                "batch has {} columns for a {}-dimensional VAE",
                z.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Mean ELBO over the rows of `z` and the gradients of its negative, with
    /// latent noise `eps` (one row per data row) held fixed.
    pub fn elbo_gradients(&self, z: &Mat, eps: &Mat) -> Result<(f64, VaeGradients)> {
        self.check_batch(z)?;
        let (m, d) = z.shape();
        let l = self.latent_dim;
        if m == 0 {
            return Err(Error::EmptyDataset);
        }
        if eps.shape() != (m, l) {
            return Err(dim_mismatch(format!("noise {:?} for batch of {m}", eps.shape())));
        }
        let (enc, enc_tape) = mlp_forward(&self.encoder, z)?;
        let xi = Mat::from_fn(m, l, |i, j| enc[(i, j)] + (0.5 * enc[(i, l + j)]).exp() * eps[(i, j)]);
        let (dec, dec_tape) = mlp_forward(&self.decoder, &xi)?;
        let mut terms = vec![0.0; m];
        for (i, t) in terms.iter_mut().enumerate() {
            let recon = reconstruction_log_likelihood(z.row(i), dec.row(i));
            let mut kl = 0.0;
            for j in 0..l {
                let (mu, lv) = (enc[(i, j)], enc[(i, l + j)]);
                kl += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
            }
            *t = recon - kl;
        }
        let elbo = tree_sum(&terms) / m as f64;
        let inv = 1.0 / m as f64;
        let up_dec = Mat::from_fn(m, d, |i, j| (dec[(i, j)] - z[(i, j)]) * inv);
        let (dec_grads, dxi) = mlp_backward(&self.decoder, dec_tape, &up_dec)?;
        let up_enc = Mat::from_fn(m, 2 * l, |i, c| {
            if c < l {
                dxi[(i, c)] + enc[(i, c)] * inv
            } else {
                let j = c - l;
                let lv = enc[(i, c)];
                0.5 * dxi[(i, j)] * eps[(i, j)] * (0.5 * lv).exp() + 0.5 * (lv.exp() - 1.0) * inv
            }
        });
        let (enc_grads, _) = mlp_backward(&self.encoder, enc_tape, &up_enc)?;
        Ok((
            elbo,
            VaeGradients {
                encoder: enc_grads,
                decoder: dec_grads,
            },
        ))
    }

    fn scores_with_noise(&self, x: &Mat, noise: &Mat) -> Result<Mat> {
        self.check_batch(x)?;
        let (n, d) = x.shape();
        let l = self.latent_dim;
        let samples = noise.rows();
        let enc = self.encoder.forward(x)?;
        let norm = (-(d as f64) * LN_2PI).exp();
        // corrected: running mean of 𝐃(ξ_s), so identical decodes stay exact
        let mut acc = Mat::zeros(n, d);
        for s in 0..samples {
            let eps = noise.row(s);
            let xi = Mat::from_fn(n, l, |i, j| enc[(i, j)] + (0.5 * enc[(i, l + j)]).exp() * eps[j]);
            let dec = self.decoder.forward(&xi)?;
            for i in 0..n {
                let (zi, di) = (x.row(i), dec.row(i));
                let arow = acc.row_mut(i);
                match self.variant {
                    VaeScoreVariant::Corrected => {
                        for j in 0..d {
                            arow[j] += (di[j] - arow[j]) / (s + 1) as f64;
                        }
                    }
                    VaeScoreVariant::SquaredLikelihood => {
                        let r2: f64 = zi.iter().zip(di).map(|(a, b)| (a - b) * (a - b)).sum();
                        let weight = norm * (-r2).exp();
                        for j in 0..d {
                            arow[j] += weight * (di[j] - zi[j]) / samples as f64;
                        }
                    }
                }
            }
        }
        if self.variant == VaeScoreVariant::Corrected {
            for i in 0..n {
                for (a, z) in acc.row_mut(i).iter_mut().zip(x.row(i)) {
                    *a -= z;
                }
            }
        }
        Ok(acc)
    }

    /// Row-wise `∇_z (score(z) · v)` under fixed noise.
    fn score_vjp_with_noise(&self, x: &Mat, v: &Mat, noise: &Mat) -> Result<Mat> {
        self.check_batch(x)?;
        if v.shape() != x.shape() {
            return Err(dim_mismatch("cotangent shape differs from batch"));
        }
        let (n, d) = x.shape();
        let l = self.latent_dim;
        let samples = noise.rows();
        let inv = 1.0 / samples as f64;
        let norm = (-(d as f64) * LN_2PI).exp();
        let (enc, enc_tape) = mlp_forward(&self.encoder, x)?;
        let mut direct = Mat::zeros(n, d);
        let mut up_enc = Mat::zeros(n, 2 * l);
        for s in 0..samples {
            let eps = noise.row(s);
            let xi = Mat::from_fn(n, l, |i, j| enc[(i, j)] + (0.5 * enc[(i, l + j)]).exp() * eps[j]);
            let (dec, dec_tape) = mlp_forward(&self.decoder, &xi)?;
            // u = ∂(g(r)·v)/∂r with r = z − 𝐃(ξ)
            let mut u = Mat::zeros(n, d);
            for i in 0..n {
                let vi = v.row(i);
                let r: Vec<f64> = x.row(i).iter().zip(dec.row(i)).map(|(a, b)| a - b).collect();
                let ui = u.row_mut(i);
                match self.variant {
                    VaeScoreVariant::Corrected => {
                        for j in 0..d {
                            ui[j] = -vi[j] * inv;
                        }
                    }
                    VaeScoreVariant::SquaredLikelihood => {
                        let r2: f64 = r.iter().map(|a| a * a).sum();
                        let w = norm * (-r2).exp();
                        let rv: f64 = r.iter().zip(vi).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ui[j] = w * (2.0 * r[j] * rv - vi[j]) * inv;
                        }
                    }
                }
            }
            direct.add_assign(&u)?;
            // r depends on z through 𝐃(ξ(z)), contributing −(∂ξ/∂z)ᵀ J_𝐃ᵀ u
            let (_, dxi) = mlp_backward(&self.decoder, dec_tape, &u)?;
            for i in 0..n {
                for j in 0..l {
                    let g = dxi[(i, j)];
                    up_enc[(i, j)] += g;
                    up_enc[(i, l + j)] += 0.5 * g * eps[j] * (0.5 * enc[(i, l + j)]).exp();
                }
            }
        }
        let (_, through_encoder) = mlp_backward(&self.encoder, enc_tape, &up_enc)?;
        direct.sub(&through_encoder)
    }
}

/// `ln p(z|ξ)` for a unit-variance Gaussian likelihood centred at `decoded`.
pub fn reconstruction_log_likelihood(z: &[f64], decoded: &[f64]) -> f64 {
    let r2: f64 = z.iter().zip(decoded).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * z.len() as f64 * LN_2PI - 0.5 * r2
}

/// One plain SGD step on the negative ELBO with a single reparameterised
/// latent draw per row. Returns the updated model and the pre-step ELBO.
pub fn vae_elbo_step(model: &VaeModel, z: &Mat, lr: f64, rng: &mut RngStream) -> Result<(VaeModel, f64)> {
    let eps = rng.normal_mat(z.rows(), model.latent_dim);
    let (elbo, grads) = model.elbo_gradients(z, &eps)?;
    let mut next = model.clone();
    if lr != 0.0 {
        apply_descent(&mut next.encoder, &grads.encoder, lr)?;
        apply_descent(&mut next.decoder, &grads.decoder, lr)?;
    }
    Ok((next, elbo))
}

pub(crate) fn apply_descent(net: &mut Mlp, grads: &MlpGrads, lr: f64) -> Result<()> {
    let mut params = net.params_flat();
    for (p, g) in params.iter_mut().zip(grads.flat()) {
        *p -= lr * g;
    }
    net.set_params_flat(&params)
}

/// Monte-Carlo score at one point with fresh latent noise from `rng`.
pub fn vae_score(model: &VaeModel, z: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    let x = Mat::new(1, z.len(), z.to_vec())?;
    let noise = rng.normal_mat(model.mc_samples, model.latent_dim);
    Ok(model.scores_with_noise(&x, &noise)?.into_data())
}

/// A VAE score with its latent noise table fixed, shared by every point.
#[derive(Clone, Debug)]
pub struct FrozenVaeScore {
    model: VaeModel,
    /// `mc_samples × latent_dim`
    noise: Mat,
}

impl FrozenVaeScore {
    pub fn model(&self) -> &VaeModel {
        &self.model
    }

    pub fn noise(&self) -> &Mat {
        &self.noise
    }

    /// Per-sample integrands `g_s(z)` (rows), whose mean is the score.
    pub fn integrands(&self, z: &[f64]) -> Result<Mat> {
        let x = Mat::new(1, z.len(), z.to_vec())?;
        let mut rows = Vec::with_capacity(self.noise.rows());
        for s in 0..self.noise.rows() {
            let single = Mat::new(1, self.noise.cols(), self.noise.row(s).to_vec())?;
            rows.push(self.model.scores_with_noise(&x, &single)?.into_data());
        }
        Mat::from_rows(&rows)
    }
}

impl ScoreFunction for FrozenVaeScore {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        let x = Mat::new(1, z.len(), z.to_vec()).expect("row vector");
        self.model
            .scores_with_noise(&x, &self.noise)
            .expect("dimension checked by caller")
            .into_data()
    }

    fn score_vjp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let x = Mat::new(1, z.len(), z.to_vec()).expect("row vector");
        let v = Mat::new(1, v.len(), v.to_vec()).expect("row vector");
        self.model
            .score_vjp_with_noise(&x, &v, &self.noise)
            .expect("dimension checked by caller")
            .into_data()
    }

    fn score_batch(&self, x: &Mat) -> Mat {
        self.model
            .scores_with_noise(x, &self.noise)
            .expect("dimension checked by caller")
    }

    fn score_vjp_batch(&self, x: &Mat, v: &Mat) -> Mat {
        self.model
            .score_vjp_with_noise(x, v, &self.noise)
            .expect("dimension checked by caller")
    }
}
