//! Experiment harnesses: Stein-identity diagnostics, the parametric
//! Monte-Carlo two-sample test and the convergence-rate study.

use serde::{Deserialize, Serialize};

use crate::discrepancy::{ksd_u_from_scores, ksd_u_statistic, SteinEstimate};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numeric::{gauss_hermite, mean_var, tree_sum, Mat, RngStream};
use crate::score::{fit_gaussian, fit_score_model, GaussianModel, ScoreFamily, ScoreFitParams, ScoreFunction, ScoreModel};

/// Per-seed estimates under `x ~ q` and their pooled z-score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub seeds: Vec<u64>,
    pub estimates: Vec<SteinEstimate>,
    /// `Σ Ŝ_k / √(Σ SE_k²)`; falls back to the across-seed spread when every
    /// per-seed standard error is zero.
    pub pooled_z: f64,
    pub pass: bool,
}

/// Checks `𝔼_q[𝒜_q f] = 0` through the KSD of samples drawn by `sampler`.
pub fn stein_identity_diagnostic<S, F>(
    score: &S,
    kernel: &KernelSpec,
    mut sampler: F,
    n: usize,
    seeds: &[u64],
) -> Result<IdentityReport>
where
    S: ScoreFunction + ?Sized,
    F: FnMut(usize, &mut RngStream) -> Result<Mat>,
{
    if seeds.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut estimates = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let x = sampler(n, &mut RngStream::new(seed))?;
        estimates.push(ksd_u_statistic(kernel, score, &x)?);
    }
    let values: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    let total = tree_sum(&values);
    let var_total = tree_sum(&estimates.iter().map(|e| e.std_error * e.std_error).collect::<Vec<_>>());
    let pooled_z = if var_total > 0.0 {
        total / var_total.sqrt()
    } else {
        let (mean, var) = mean_var(&values);
        if var > 0.0 {
            mean / (var / values.len() as f64).sqrt()
        } else {
            0.0
        }
    };
    Ok(IdentityReport {
        seeds: seeds.to_vec(),
        estimates,
        pooled_z,
        pass: pooled_z.abs() <= 3.0,
    })
}

/// Outcome of [`two_sample_test`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Empirical `(1−α)` quantile of the null draws; `None` stands for `−∞`
    /// (level 1 rejects everything).
    pub null_quantile: Option<f64>,
    pub p_value: f64,
    pub reject: bool,
    pub null_draws: usize,
}

/// Settings shared by every replicate of [`two_sample_test`].
#[derive(Clone, Debug, PartialEq)]
pub struct TwoSampleConfig {
    pub family: ScoreFamily,
    pub fit: ScoreFitParams,
    pub kernel: KernelSpec,
    pub alpha: f64,
    pub null_draws: usize,
}

fn ksd_against(kernel: &KernelSpec, model: &ScoreModel, x: &Mat, rng: &mut RngStream) -> Result<f64> {
    let frozen = model.freeze(rng);
    let s = frozen.score_batch(x);
    Ok(ksd_u_from_scores(kernel, x, &s)?.value)
}

/// KSD goodness-of-fit of `x_source` against a model fitted to `z_target`,
/// calibrated by refitting and redrawing both samples from the fitted model.
pub fn two_sample_test(x_source: &Mat, z_target: &Mat, cfg: &TwoSampleConfig, rng: &mut RngStream) -> Result<TestResult> {
    let (n, m) = (x_source.rows(), z_target.rows());
    if n < 2 || m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n.min(m) });
    }
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::Parse(format!("level must lie in (0, 1], got {}", cfg.alpha)));
    }
    if cfg.family == ScoreFamily::Vae {
        return Err(Error::UnsupportedVariant("parametric null for a VAE target model"));
    }
    if cfg.null_draws == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut fit_rng = rng.split(0);
    let q_hat = fit_score_model(cfg.family, z_target, &cfg.fit, &mut fit_rng)?;
    let statistic = ksd_against(&cfg.kernel, &q_hat, x_source, &mut fit_rng)?;
    let mut null = Vec::with_capacity(cfg.null_draws);
    for b in 0..cfg.null_draws {
        let mut r = rng.split(1 + b as u64);
        let z_b = q_hat.sample(m, &mut r)?;
        let q_b = fit_score_model(cfg.family, &z_b, &cfg.fit, &mut r)?;
        let x_b = q_hat.sample(n, &mut r)?;
        null.push(ksd_against(&cfg.kernel, &q_b, &x_b, &mut r)?);
    }
    Ok(decide(statistic, null, cfg.alpha))
}

fn decide(statistic: f64, mut null: Vec<f64>, alpha: f64) -> TestResult {
    let b = null.len();
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    null.sort_by(f64::total_cmp);
    let rank = ((1.0 - alpha) * b as f64).ceil() as usize;
    let null_quantile = if rank == 0 { None } else { Some(null[rank - 1]) };
    let reject = match null_quantile {
        None => true,
        Some(qv) => statistic > qv,
    };
    TestResult {
        statistic,
        null_quantile,
        p_value: (1 + exceed) as f64 / (b + 1) as f64,
        reject,
        null_draws: b,
    }
}

/// Log-log fit of RMSE against sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub sizes: Vec<usize>,
    pub rmse: Vec<f64>,
    pub slope: f64,
    pub slope_std_error: f64,
}

/// One replicate of the convergence study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub phase: String,
    pub size: usize,
    pub rep: usize,
    pub estimate: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceConfig {
    pub kernel: KernelSpec,
    pub n_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub reps: usize,
    /// Source sample size held fixed while `m` varies.
    pub n_fixed: usize,
    pub quadrature_nodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceOutcome {
    /// Population discrepancy from quadrature.
    pub ground_truth: f64,
    pub n_fit: RateFit,
    pub m_fit: RateFit,
    pub rows: Vec<RateRow>,
}

/// `𝔼_{x,x′∼p}[u_q(x,x′)]` for 1D Gaussians by tensor Gauss–Hermite quadrature.
pub fn stein_discrepancy_quadrature(p: &GaussianModel, q: &GaussianModel, kernel: &KernelSpec, nodes: usize) -> Result<f64> {
    if p.dim() != 1 || q.dim() != 1 {
        return Err(Error::OracleUnavailable("quadrature needs one-dimensional Gaussians".into()));
    }
    let (t, w) = gauss_hermite(nodes)?;
    let scale = (2.0 * p.cov()[(0, 0)]).sqrt();
    let pts: Vec<f64> = t.iter().map(|ti| p.mean()[0] + scale * ti).collect();
    let wts: Vec<f64> = w.iter().map(|wi| wi / std::f64::consts::PI.sqrt()).collect();
    let scores: Vec<f64> = pts.iter().map(|x| q.score(&[*x])[0]).collect();
    let mut terms = Vec::with_capacity(nodes * nodes);
    for i in 0..nodes {
        for j in 0..nodes {
            let r = pts[i] - pts[j];
            let rho = r * r;
            let pr = kernel.profile(rho);
            let u = pr.phi * scores[i] * scores[j] + 2.0 * pr.d1 * r * (scores[j] - scores[i])
                - 4.0 * pr.d2 * rho
                - 2.0 * pr.d1;
            terms.push(wts[i] * wts[j] * u);
        }
    }
    Ok(tree_sum(&terms))
}

fn rate_fit(sizes: &[usize], errors: &[Vec<f64>]) -> Result<RateFit> {
    if sizes.len() < 2 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parse("rate grid needs at least two strictly increasing sizes".into()));
    }
    let mut rmse = Vec::with_capacity(sizes.len());
    let mut log_var = Vec::with_capacity(sizes.len());
    for e in errors {
        let sq: Vec<f64> = e.iter().map(|v| v * v).collect();
        let mean_sq = tree_sum(&sq) / sq.len() as f64;
        if !(mean_sq > 0.0) {
            return Err(Error::DegenerateData("zero RMSE at a grid point".into()));
        }
        rmse.push(mean_sq.sqrt());
        // delta method for normal errors: Var(½ ln mean e²) ≈ 1/(2R)
        log_var.push(1.0 / (2.0 * e.len() as f64));
    }
    let xs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = rmse.iter().map(|r| r.ln()).collect();
    let k = xs.len() as f64;
    let xbar = tree_sum(&xs) / k;
    let ybar = tree_sum(&ys) / k;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let var_slope: f64 = xs
        .iter()
        .zip(&log_var)
        .map(|(x, v)| ((x - xbar) / sxx).powi(2) * v)
        .sum();
    Ok(RateFit {
        sizes: sizes.to_vec(),
        rmse,
        slope,
        slope_std_error: var_slope.sqrt(),
    })
}

/// Rate study on 1D Gaussians. Phase `n` draws `x ~ p` and scores with the
/// exact `q`; phase `m` keeps one `x` of size `n_fixed` per replicate and
/// measures `Ŝ_q̂(x) − Ŝ_q(x)` with `q̂` fitted to `m` draws from `q`.
pub fn convergence_experiment(
    p: &GaussianModel,
    q: &GaussianModel,
    cfg: &ConvergenceConfig,
    rng: &RngStream,
) -> Result<ConvergenceOutcome> {
    let truth = stein_discrepancy_quadrature(p, q, &cfg.kernel, cfg.quadrature_nodes)?;
    if cfg.reps == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut rows = Vec::new();
    let phase_n = rng.split(1);
    let mut n_errors = Vec::with_capacity(cfg.n_grid.len());
    for (g, &n) in cfg.n_grid.iter().enumerate() {
        let mut errs = Vec::with_capacity(cfg.reps);
        for rep in 0..cfg.reps {
            let mut r = phase_n.split(g as u64).split(rep as u64);
            let x = p.sample(n, &mut r);
            let est = ksd_u_statistic(&cfg.kernel, q, &x)?.value;
            errs.push(est - truth);
            rows.push(RateRow {
                phase: "n".into(),
                size: n,
                rep,
                estimate: est,
                error: est - truth,
            });
        }
        n_errors.push(errs);
    }
    let phase_m = rng.split(2);
    let mut m_errors = vec![Vec::with_capacity(cfg.reps); cfg.m_grid.len()];
    for rep in 0..cfg.reps {
        let mut rx = phase_m.split(u64::MAX).split(rep as u64);
        let x = p.sample(cfg.n_fixed, &mut rx);
        let exact = ksd_u_statistic(&cfg.kernel, q, &x)?.value;
        for (g, &m) in cfg.m_grid.iter().enumerate() {
            let mut r = phase_m.split(g as u64).split(rep as u64);
            let q_hat = fit_gaussian(&q.sample(m, &mut r))?;
            let est = ksd_u_statistic(&cfg.kernel, &q_hat, &x)?.value;
            m_errors[g].push(est - exact);
            rows.push(RateRow {
                phase: "m".into(),
                size: m,
                rep,
                estimate: est,
                error: est - exact,
            });
        }
    }
    Ok(ConvergenceOutcome {
        ground_truth: truth,
        n_fit: rate_fit(&cfg.n_grid, &n_errors)?,
        m_fit: rate_fit(&cfg.m_grid, &m_errors)?,
        rows,
    })
}

/// MMD permutation test with an RBF kernel. Returns whether it rejects at `alpha`.
pub fn mmd_permutation_test(x: &Mat, y: &Mat, kernel: &KernelSpec, permutations: usize, alpha: f64, rng: &mut RngStream) -> Result<TestResult> {
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n.min(m) });
    }
    let pooled = x.vstack(y)?;
    let total = n + m;
    let gram = crate::kernels::gram_matrix(kernel, &pooled);
    let row_sums: Vec<f64> = (0..total).map(|i| gram.row(i).iter().sum()).collect();
    let grand: f64 = row_sums.iter().sum();
    let diag: Vec<f64> = (0..total).map(|i| gram[(i, i)]).collect();
    let diag_total: f64 = diag.iter().sum();
    // labels listing the second sample; every block sum follows from YY and row sums
    let stat = |ys: &[usize]| {
        let mut yy = 0.0;
        let mut y_rows = 0.0;
        let mut y_diag = 0.0;
        for &a in ys {
            y_rows += row_sums[a];
            y_diag += diag[a];
            for &b in ys {
                yy += gram[(a, b)];
            }
        }
        let xy = y_rows - yy;
        let xx = grand - 2.0 * xy - yy;
        let (nf, mf) = (n as f64, m as f64);
        (xx - (diag_total - y_diag)) / (nf * (nf - 1.0)) - 2.0 * xy / (nf * mf) + (yy - y_diag) / (mf * (mf - 1.0))
    };
    let observed: Vec<usize> = (n..total).collect();
    let statistic = stat(&observed);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        let perm = rng.permutation(total);
        null.push(stat(&perm[n..]));
    }
    Ok(decide(statistic, null, alpha))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub dim: usize,
    pub n_fixed: usize,
    pub m_grid: Vec<usize>,
    pub trials: usize,
    pub shift: f64,
    pub alpha: f64,
    pub null_draws: usize,
    pub permutations: usize,
    pub kernel: KernelSpec,
}

/// Rejection rates at one target size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub ksd_type1: f64,
    pub ksd_power: f64,
    pub mmd_type1: f64,
    pub mmd_power: f64,
}

/// Per-trial decisions behind a [`SweepRow`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub m: usize,
    pub trial: usize,
    pub ksd_null_p: f64,
    pub ksd_alt_p: f64,
    pub ksd_null_reject: bool,
    pub ksd_alt_reject: bool,
    pub mmd_null_reject: bool,
    pub mmd_alt_reject: bool,
}

/// Type-I error and power of the KSD test (Gaussian target model) and an MMD
/// permutation test, for each target size. Source is `N(0, I)` under the null
/// and `N(shift·1, I)` under the alternative; target is always `N(0, I)`.
pub fn imbalance_sweep(cfg: &SweepConfig, rng: &RngStream) -> Result<(Vec<SweepRow>, Vec<SweepTrial>)> {
    if cfg.m_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parse("target sizes must be strictly increasing".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let test_cfg = TwoSampleConfig {
        family: ScoreFamily::Gaussian,
        fit: ScoreFitParams::default(),
        kernel: cfg.kernel,
        alpha: cfg.alpha,
        null_draws: cfg.null_draws,
    };
    let mut rows = Vec::with_capacity(cfg.m_grid.len());
    let mut trials = Vec::new();
    for (g, &m) in cfg.m_grid.iter().enumerate() {
        let mut counts = [0usize; 4];
        for t in 0..cfg.trials {
            let base = rng.split(g as u64).split(t as u64);
            let mut r = base.split(0);
            let z = r.normal_mat(m, cfg.dim);
            let x_null = r.normal_mat(cfg.n_fixed, cfg.dim);
            let mut x_alt = x_null.clone();
            for v in x_alt.data_mut() {
                *v += cfg.shift;
            }
            let ksd_null = two_sample_test(&x_null, &z, &test_cfg, &mut base.split(1))?;
            let ksd_alt = two_sample_test(&x_alt, &z, &test_cfg, &mut base.split(1))?;
            let mmd_null = mmd_permutation_test(&x_null, &z, &cfg.kernel, cfg.permutations, cfg.alpha, &mut base.split(2))?;
            let mmd_alt = mmd_permutation_test(&x_alt, &z, &cfg.kernel, cfg.permutations, cfg.alpha, &mut base.split(2))?;
            for (c, rej) in counts
                .iter_mut()
                .zip([ksd_null.reject, ksd_alt.reject, mmd_null.reject, mmd_alt.reject])
            {
                *c += rej as usize;
            }
            trials.push(SweepTrial {
                m,
                trial: t,
                ksd_null_p: ksd_null.p_value,
                ksd_alt_p: ksd_alt.p_value,
                ksd_null_reject: ksd_null.reject,
                ksd_alt_reject: ksd_alt.reject,
                mmd_null_reject: mmd_null.reject,
                mmd_alt_reject: mmd_alt.reject,
            });
        }
        let rate = |c: usize| c as f64 / cfg.trials as f64;
        rows.push(SweepRow {
            m,
            ksd_type1: rate(counts[0]),
            ksd_power: rate(counts[1]),
            mmd_type1: rate(counts[2]),
            mmd_power: rate(counts[3]),
        });
    }
    Ok((rows, trials))
}
