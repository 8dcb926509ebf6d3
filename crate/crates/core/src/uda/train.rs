use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{make_blob_shift, make_two_moons, split_target, Dataset, Domain};
use crate::discrepancy::{adversarial_feature_loss, adversarial_stein_estimate, ksd_v_with_grad};
use crate::error::{dim_mismatch, Error, Result};
use crate::kernels::KernelSpec;
use crate::nnet::{
    clip_gradients, mlp_backward, mlp_forward, sgd_step, softmax_cross_entropy, Activation, Mlp, MlpGrads, SgdState,
};
use crate::numeric::{tree_sum, Mat, RngStream};
use crate::score::{
    fit_gaussian, fit_gmm_em, gmm_sgd_step, vae_elbo_step, FrozenScore, GaussianModel, ScoreFamily, ScoreFunction, ScoreModel,
    VaeModel,
};

// Child-stream tags of the run seed. Every consumer owns its own stream so
// that, e.g., turning the transfer loss on or off cannot shift the data
// order or the initial weights.
const TAG_DATA: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_EPOCH: u64 = 3;
const TAG_SCORE: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferForm {
    #[default]
    Kernelized,
    Adversarial,
}

impl fmt::Display for TransferForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferForm::Kernelized => "kernelized",
            TransferForm::Adversarial => "adversarial",
        })
    }
}

impl FromStr for TransferForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernelized" => Ok(TransferForm::Kernelized),
            "adversarial" => Ok(TransferForm::Adversarial),
            other => Err(Error::Parse(format!("unknown transfer form '{other}'"))),
        }
    }
}

/// How often the target score model is updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateCadence {
    #[default]
    Batch,
    Epoch,
}

/// Where the source and target samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Source at rotation 0, target rotated by `rotation` degrees.
    TwoMoons { n: usize, noise: f64, rotation: f64 },
    BlobShift {
        n: usize,
        d: usize,
        mean_shift: f64,
        cov_scale: f64,
        classes: usize,
    },
    /// Dataset CSV with both domains; target rows must be labeled so a
    /// held-out part can be scored.
    Csv { path: String },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::TwoMoons {
            n: 2000,
            noise: 0.1,
            rotation: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda_max: f64,
    /// Sigmoid ramp rate of the trade-off schedule.
    pub gamma: f64,
    pub warmup_epochs: usize,
    pub target_percent: f64,
    pub target_min: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub form: TransferForm,
    pub score: ScoreFamily,
    pub kernel: KernelSpec,
    pub components: usize,
    pub gmm_lr: f64,
    pub latent_dim: usize,
    pub vae_hidden: usize,
    pub vae_lr: f64,
    pub mc_samples: usize,
    pub score_update: UpdateCadence,
    /// Capacity of the Gaussian refit buffer, in distinct target rows.
    pub buffer_size: usize,
    /// Added to the diagonal of the refitted target covariance.
    pub cov_ridge: f64,
    pub critic_hidden: usize,
    pub critic_lr: f64,
    pub critic_momentum: f64,
    pub critic_weight_decay: f64,
    pub ascent_steps: usize,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 50,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 5.0,
            lambda_max: 1.0,
            gamma: 10.0,
            warmup_epochs: 1,
            target_percent: 0.001,
            target_min: 32,
            hidden: 16,
            bottleneck: 4,
            form: TransferForm::Kernelized,
            score: ScoreFamily::Gaussian,
            kernel: KernelSpec::rbf(1.0),
            components: 2,
            gmm_lr: 0.01,
            latent_dim: 2,
            vae_hidden: 16,
            vae_lr: 0.01,
            mc_samples: crate::score::DEFAULT_MC_SAMPLES,
            score_update: UpdateCadence::Batch,
            buffer_size: 512,
            cov_ridge: 0.1,
            critic_hidden: 16,
            critic_lr: 0.01,
            critic_momentum: 0.0,
            critic_weight_decay: 1e-3,
            ascent_steps: 5,
            data: DataSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("gamma", self.gamma),
            ("clip_norm", self.clip_norm),
            ("gmm_lr", self.gmm_lr),
            ("vae_lr", self.vae_lr),
            ("critic_lr", self.critic_lr),
            ("kernel.bandwidth", self.kernel.bandwidth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parse(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_max", self.lambda_max),
            ("critic_momentum", self.critic_momentum),
            ("critic_weight_decay", self.critic_weight_decay),
            ("cov_ridge", self.cov_ridge),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parse(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Parse(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.target_min < 2 {
            return Err(Error::Parse(format!("target_min must be at least 2, got {}", self.target_min)));
        }
        if !(self.target_percent > 0.0 && self.target_percent <= 1.0) {
            return Err(Error::Parse(format!(
                "target_percent must lie in (0, 1], got {}",
                self.target_percent
            )));
        }
        let sizes = [
            ("hidden", self.hidden),
            ("bottleneck", self.bottleneck),
            ("components", self.components),
            ("latent_dim", self.latent_dim),
            ("vae_hidden", self.vae_hidden),
            ("mc_samples", self.mc_samples),
            ("buffer_size", self.buffer_size),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Parse(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn kernelized(&self) -> bool {
        self.form == TransferForm::Kernelized
    }
}

/// `0` during warm-up, then `λ_max·(2/(1 + e^{−γ·p}) − 1)` with
/// `p = (epoch − warmup)/total`. `epoch` may be fractional.
pub fn lambda_schedule(epoch: f64, warmup: usize, total: usize, gamma: f64, lambda_max: f64) -> f64 {
    let w = warmup as f64;
    if epoch < w {
        return 0.0;
    }
    let p = (epoch - w) / total.max(1) as f64;
    lambda_max * (2.0 / (1.0 + (-gamma * p).exp()) - 1.0)
}

/// Feature extractor, classifier and, for the adversarial form, the critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdaModel {
    pub extractor: Mlp,
    pub classifier: Mlp,
    pub form: TransferForm,
    pub score_family: ScoreFamily,
    pub critic: Option<Mlp>,
    pub kernel: Option<KernelSpec>,
}

impl UdaModel {
    /// `g: d → hidden → bottleneck` (tanh), `c: bottleneck → classes`, and
    /// the critic `f: bottleneck → h → h → bottleneck` (tanh throughout).
    pub fn new(input_dim: usize, classes: usize, cfg: &TrainConfig, rng: &RngStream) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Parse(format!("need at least 2 classes, got {classes}")));
        }
        let b = cfg.bottleneck;
        let extractor = Mlp::new(
            &[input_dim, cfg.hidden, b],
            &[Activation::Tanh, Activation::Tanh],
            &rng.split(0),
        )?;
        let classifier = Mlp::new(&[b, classes], &[Activation::Identity], &rng.split(1))?;
        let critic = match cfg.form {
            TransferForm::Adversarial => Some(Mlp::new(
                &[b, cfg.critic_hidden, cfg.critic_hidden, b],
                &[Activation::Tanh; 3],
                &rng.split(2),
            )?),
            TransferForm::Kernelized => None,
        };
        Ok(UdaModel {
            extractor,
            classifier,
            form: cfg.form,
            score_family: cfg.score,
            critic,
            kernel: cfg.kernelized().then_some(cfg.kernel),
        })
    }

    pub fn features(&self, x: &Mat) -> Result<Mat> {
        self.extractor.forward(x)
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        self.classifier.forward(&self.features(x)?)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }

    fn check(&self) -> Result<()> {
        let b = self.extractor.output_dim();
        if self.classifier.input_dim() != b {
            return Err(dim_mismatch("classifier input differs from feature width"));
        }
        match (self.form, &self.critic, &self.kernel) {
            (TransferForm::Adversarial, Some(f), None) => {
                if f.input_dim() != b || f.output_dim() != b {
                    return Err(dim_mismatch("critic must map features to features"));
                }
            }
            (TransferForm::Kernelized, None, Some(_)) => {}
            _ => return Err(Error::Parse("critic is required exactly for the adversarial form".into())),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub error: f64,
}

pub fn evaluate(model: &UdaModel, data: &Dataset) -> Result<Evaluation> {
    let labels = data.labels().ok_or(Error::MissingLabels)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = model.predict(data.features())?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let accuracy = hits as f64 / data.len() as f64;
    Ok(Evaluation {
        accuracy,
        error: 1.0 - accuracy,
    })
}

/// The most recent features of up to `capacity` distinct target rows,
/// oldest first. Re-seeing a row replaces its features and makes it newest.
#[derive(Clone, Debug, Default)]
pub struct FeatureBuffer {
    capacity: usize,
    entries: Vec<(usize, Vec<f64>)>,
}

impl FeatureBuffer {
    pub fn new(capacity: usize) -> Self {
        FeatureBuffer {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, index: usize, features: &[f64]) {
        if let Some(pos) = self.entries.iter().position(|(i, _)| *i == index) {
            self.entries.remove(pos);
        }
        if self.entries.len() == self.capacity {
            self.entries.remove(0);
        }
        self.entries.push((index, features.to_vec()));
    }

    pub fn matrix(&self) -> Result<Mat> {
        Mat::from_rows(&self.entries.iter().map(|(_, f)| f.as_slice()).collect::<Vec<_>>())
    }
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch mean of the classification loss.
    pub loss_c: f64,
    /// Batch mean of the transfer loss before the tanh rescaling.
    pub loss_d_raw: f64,
    /// Batch mean of `tanh(loss_d_raw)`.
    pub loss_d_scaled: f64,
    /// Batch mean of the trade-off weight.
    pub lambda: f64,
    /// Critic objective before and after each ascent step, averaged over
    /// batches; empty for the kernelized form.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub critic_trace: Vec<f64>,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: UdaModel,
    opt_g: SgdState,
    opt_c: SgdState,
    opt_f: SgdState,
    target_model: Option<ScoreModel>,
    buffer: FeatureBuffer,
    rng: RngStream,
}

impl TrainState {
    pub fn new(input_dim: usize, classes: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = RngStream::new(cfg.seed);
        let model = UdaModel::new(input_dim, classes, cfg, &rng.split(TAG_INIT))?;
        Ok(TrainState::from_model(model, cfg, rng))
    }

    /// Starts from given networks; `rng` is the run's root stream.
    pub fn from_model(model: UdaModel, cfg: &TrainConfig, rng: RngStream) -> Self {
        TrainState {
            model,
            opt_g: SgdState::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            opt_c: SgdState::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            opt_f: SgdState::new(cfg.critic_lr, cfg.critic_momentum, cfg.critic_weight_decay),
            target_model: None,
            buffer: FeatureBuffer::new(cfg.buffer_size),
            rng,
        }
    }

    pub fn target_model(&self) -> Option<&ScoreModel> {
        self.target_model.as_ref()
    }

    pub fn buffer(&self) -> &FeatureBuffer {
        &self.buffer
    }

    /// Feeds target features to the score model: a Gaussian refits to the
    /// buffer, a GMM takes one gradient step, a VAE one ELBO step. The first
    /// update of a GMM or VAE initialises it from the buffer.
    fn update_target_model(&mut self, idx: &[usize], zt: &Mat, cfg: &TrainConfig, rng: &mut RngStream) -> Result<()> {
        for (r, &i) in idx.iter().enumerate() {
            self.buffer.push(i, zt.row(r));
        }
        let next = match (cfg.score, self.target_model.take()) {
            (ScoreFamily::Gaussian, _) => {
                let fit = fit_gaussian(&self.buffer.matrix()?)?;
                let mut cov = fit.cov().clone();
                for k in 0..cov.rows() {
                    cov[(k, k)] += cfg.cov_ridge;
                }
                ScoreModel::Gaussian(GaussianModel::new(fit.mean().to_vec(), cov)?)
            }
            (ScoreFamily::Gmm, Some(ScoreModel::Gmm(m))) => ScoreModel::Gmm(gmm_sgd_step(&m, zt, cfg.gmm_lr)?),
            (ScoreFamily::Gmm, _) => {
                let z = self.buffer.matrix()?;
                ScoreModel::Gmm(fit_gmm_em(&z, cfg.components.min(z.rows()), 50, rng)?.model)
            }
            (ScoreFamily::Vae, prev) => {
                let vae = match prev {
                    Some(ScoreModel::Vae(v)) => v,
                    _ => VaeModel::new(zt.cols(), cfg.vae_hidden, cfg.latent_dim, &rng.fork())?
                        .with_mc_samples(cfg.mc_samples)?,
                };
                ScoreModel::Vae(vae_elbo_step(&vae, zt, cfg.vae_lr, rng)?.0)
            }
        };
        self.target_model = Some(next);
        Ok(())
    }
}

/// Hands out target row indices in reshuffled passes, so a target set
/// smaller than a batch is cycled.
struct TargetCycle {
    m: usize,
    queue: Vec<usize>,
    rng: RngStream,
}

impl TargetCycle {
    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.queue.is_empty() {
                self.queue = self.rng.permutation(self.m);
                self.queue.reverse();
            }
            out.push(self.queue.pop().expect("refilled"));
        }
        out
    }
}

/// `λ·tanh(KSD_V)` of the extractor's features against a fixed score, with
/// its gradient in the extractor's parameters. The score model is held
/// constant; only the features move.
pub fn kernelized_transfer<S: ScoreFunction + ?Sized>(
    extractor: &Mlp,
    score: &S,
    kernel: &KernelSpec,
    x: &Mat,
    lambda: f64,
) -> Result<(f64, MlpGrads)> {
    let (z, tape) = mlp_forward(extractor, x)?;
    let (raw, mut gz) = ksd_v_with_grad(kernel, score, &z)?;
    let t = raw.tanh();
    gz.scale(lambda * (1.0 - t * t));
    let (grads, _) = mlp_backward(extractor, tape, &gz)?;
    Ok((lambda * t, grads))
}

#[derive(Default)]
struct EpochSums {
    loss_c: Vec<f64>,
    raw: Vec<f64>,
    scaled: Vec<f64>,
    lambda: Vec<f64>,
    critic: Vec<Vec<f64>>,
}

impl EpochSums {
    fn finish(self, epoch: usize) -> EpochLog {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { tree_sum(v) / v.len() as f64 };
        let steps = self.critic.first().map_or(0, Vec::len);
        let critic_trace = (0..steps)
            .map(|k| mean(&self.critic.iter().map(|t| t[k]).collect::<Vec<_>>()))
            .collect();
        EpochLog {
            epoch,
            loss_c: mean(&self.loss_c),
            loss_d_raw: mean(&self.raw),
            loss_d_scaled: mean(&self.scaled),
            lambda: mean(&self.lambda),
            critic_trace,
        }
    }
}

fn run_epoch(state: &mut TrainState, source: &Dataset, target: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<EpochLog> {
    state.model.check()?;
    let labels = source.labels().ok_or(Error::MissingLabels)?;
    if source.dim() != target.dim() || source.dim() != state.model.extractor.input_dim() {
        return Err(dim_mismatch("source, target and network input widths differ"));
    }
    if target.is_empty() || source.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let bs = cfg.batch_size.min(source.len());
    let erng = state.rng.split(TAG_EPOCH).split(epoch as u64);
    let order = erng.split(0).permutation(source.len());
    let mut cycle = TargetCycle {
        m: target.len(),
        queue: Vec::new(),
        rng: erng.split(1),
    };
    let mut score_rng = state.rng.split(TAG_SCORE).split(epoch as u64);
    // a trailing batch of one row carries no pairwise signal and is dropped
    let batches: Vec<&[usize]> = order.chunks(bs).filter(|c| c.len() >= 2).collect();
    let nb = batches.len();
    let total = cfg.epochs.saturating_sub(cfg.warmup_epochs);
    let mut sums = EpochSums::default();
    for (b, idx) in batches.into_iter().enumerate() {
        let lambda = lambda_schedule(
            epoch as f64 + b as f64 / nb as f64,
            cfg.warmup_epochs,
            total,
            cfg.gamma,
            cfg.lambda_max,
        );
        let xs = source.features().select_rows(idx);
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (zs, tape_g) = mlp_forward(&state.model.extractor, &xs)?;
        let (logits, tape_c) = mlp_forward(&state.model.classifier, &zs)?;
        let (loss_c, dlogits) = softmax_cross_entropy(&logits, &ys)?;
        let (mut grad_c, mut dzs) = mlp_backward(&state.model.classifier, tape_c, &dlogits)?;

        if b == 0 || cfg.score_update == UpdateCadence::Batch {
            let tidx = cycle.take(bs);
            let zt = state.model.extractor.forward(&target.features().select_rows(&tidx))?;
            state.update_target_model(&tidx, &zt, cfg, &mut score_rng)?;
        }
        let frozen: FrozenScore = state
            .target_model
            .as_ref()
            .expect("updated on the first batch")
            .freeze(&mut score_rng);
        let (raw, gz) = match state.model.form {
            TransferForm::Kernelized => {
                let kernel = state.model.kernel.expect("checked");
                ksd_v_with_grad(&kernel, &frozen, &zs)?
            }
            TransferForm::Adversarial => {
                let critic = state.model.critic.take().expect("checked");
                let est = adversarial_stein_estimate(&frozen, critic, &zs, cfg.ascent_steps, &mut state.opt_f)?;
                sums.critic.push(est.trace);
                state.model.critic = Some(est.critic);
                adversarial_feature_loss(&frozen, state.model.critic.as_ref().expect("restored"), &zs)?
            }
        };
        let scaled = raw.tanh();
        if !loss_c.is_finite() || !raw.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                detail: format!("loss_c = {loss_c}, loss_d = {raw}"),
            });
        }
        if lambda != 0.0 {
            let w = lambda * (1.0 - scaled * scaled);
            for (d, g) in dzs.data_mut().iter_mut().zip(gz.data()) {
                *d += w * g;
            }
        }
        let (mut grad_g, _) = mlp_backward(&state.model.extractor, tape_g, &dzs)?;
        clip_gradients(&mut [&mut grad_g, &mut grad_c], cfg.clip_norm);
        if !grad_g.all_finite() || !grad_c.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                detail: "non-finite gradient".into(),
            });
        }
        sgd_step(&mut state.opt_g, &mut state.model.extractor, &grad_g)?;
        sgd_step(&mut state.opt_c, &mut state.model.classifier, &grad_c)?;
        sums.loss_c.push(loss_c);
        sums.raw.push(raw);
        sums.scaled.push(scaled);
        sums.lambda.push(lambda);
    }
    Ok(sums.finish(epoch))
}

/// One epoch minimising `𝓛_C + λ·tanh(KSD_V)` over the extractor and
/// classifier, the KSD taken between source features and the target score.
pub fn train_epoch_kernelized(
    state: &mut TrainState,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochLog> {
    if state.model.form != TransferForm::Kernelized {
        return Err(Error::Parse("model was built for the adversarial form".into()));
    }
    run_epoch(state, source, target, cfg, epoch)
}

/// One epoch alternating critic ascent on frozen source features with a
/// descent step on `𝓛_C + λ·tanh(𝒜f)` under the frozen critic.
pub fn train_epoch_adversarial(
    state: &mut TrainState,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochLog> {
    if state.model.form != TransferForm::Adversarial {
        return Err(Error::Parse("model was built for the kernelized form".into()));
    }
    run_epoch(state, source, target, cfg, epoch)
}

/// Labeled source, unlabeled scarce target and the held-out labeled target.
#[derive(Clone, Debug, PartialEq)]
pub struct UdaData {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

/// Materialises `cfg.data` and splits the target pool into the scarce
/// training subsample and the test remainder. Relative CSV paths are taken
/// from `base`.
pub fn prepare_data(cfg: &TrainConfig, base: Option<&Path>) -> Result<UdaData> {
    let rng = RngStream::new(cfg.seed).split(TAG_DATA);
    let (source, pool) = match &cfg.data {
        DataSpec::TwoMoons { n, noise, rotation } => (
            make_two_moons(*n, *noise, 0.0, &mut rng.split(0))?,
            make_two_moons(*n, *noise, *rotation, &mut rng.split(1))?.with_domain(Domain::Target),
        ),
        DataSpec::BlobShift {
            n,
            d,
            mean_shift,
            cov_scale,
            classes,
        } => make_blob_shift(*n, *d, *mean_shift, *cov_scale, *classes, &mut rng.split(0))?,
        DataSpec::Csv { path } => {
            let p = Path::new(path);
            let full = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.to_path_buf(),
            };
            let split = crate::io::read_datasets_file(&full)?;
            match (split.source, split.target) {
                (Some(s), Some(t)) => (s, t),
                _ => return Err(Error::Parse("data file needs both source and target rows".into())),
            }
        }
    };
    if pool.labels().is_none() {
        return Err(Error::MissingLabels);
    }
    let (train, test) = split_target(&pool, cfg.target_percent, cfg.target_min, &mut rng.split(2))?;
    if test.is_empty() {
        return Err(Error::Parse("no target rows left for testing".into()));
    }
    Ok(UdaData {
        source,
        target_train: train.without_labels(),
        target_test: test,
    })
}

/// Result-record row for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_d_raw: f64,
    pub loss_d_scaled: f64,
    pub lambda: f64,
    pub target_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdaResult {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_acc: f64,
    pub final_acc: f64,
    /// Per-epoch `loss_d_raw`.
    pub ksd_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct UdaRun {
    pub result: UdaResult,
    /// Networks at the best epoch (earliest on ties).
    pub best_model: UdaModel,
}

/// Trains for `cfg.epochs`, scoring the target test set after every epoch.
pub fn run_uda(source: &Dataset, target_train: &Dataset, target_test: &Dataset, cfg: &TrainConfig) -> Result<UdaRun> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::Parse("epochs must be positive".into()));
    }
    let classes = source.classes().max(target_test.classes());
    let mut state = TrainState::new(source.dim(), classes, cfg)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, UdaModel)> = None;
    for epoch in 0..cfg.epochs {
        let log = match cfg.form {
            TransferForm::Kernelized => train_epoch_kernelized(&mut state, source, target_train, cfg, epoch)?,
            TransferForm::Adversarial => train_epoch_adversarial(&mut state, source, target_train, cfg, epoch)?,
        };
        let acc = evaluate(&state.model, target_test)?.accuracy;
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((epoch, acc, state.model.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            loss_c: log.loss_c,
            loss_d_raw: log.loss_d_raw,
            loss_d_scaled: log.loss_d_scaled,
            lambda: log.lambda,
            target_acc: acc,
        });
    }
    let (best_epoch, best_acc, best_model) = best.expect("at least one epoch");
    Ok(UdaRun {
        result: UdaResult {
            config: cfg.clone(),
            final_acc: epochs.last().expect("at least one epoch").target_acc,
            ksd_trace: epochs.iter().map(|e| e.loss_d_raw).collect(),
            epochs,
            best_epoch,
            best_acc,
        },
        best_model,
    })
}
