//! Stein operator, kernel Stein discrepancies and MMD.
//!
//! Pairwise reductions visit rows in lexicographic order of their
//! coordinates, so every statistic is exactly invariant to the row order of
//! its inputs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::kernels::KernelSpec;
use crate::nnet::{mlp_divergence, sgd_step, stein_critic_pass, Mlp, SgdState};
use crate::numeric::{mean_var, spd_factor, spd_solve, sym_eigen, tree_sum, Mat, RngStream};
use crate::score::ScoreFunction;

/// U-statistic estimate of the kernel Stein discrepancy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinEstimate {
    pub value: f64,
    /// Sample variance of the off-diagonal Stein-kernel entries.
    pub u_variance: f64,
    /// `√(2σ̂_u²/n)`
    pub std_error: f64,
    pub n: usize,
    /// Target sample size behind the score model, when known.
    pub m: Option<usize>,
}

impl SteinEstimate {
    pub fn with_target_size(mut self, m: usize) -> Self {
        self.m = Some(m);
        self
    }

    pub fn record(&self, kernel: &KernelSpec, score_variant: &str, seed: u64) -> SteinRecord {
        SteinRecord {
            value: self.value,
            u_variance: self.u_variance,
            std_error: self.std_error,
            n: self.n,
            m: self.m,
            kernel: *kernel,
            score_variant: score_variant.to_string(),
            seed,
        }
    }
}

/// Serialized form of a [`SteinEstimate`] with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteinRecord {
    pub value: f64,
    pub u_variance: f64,
    pub std_error: f64,
    pub n: usize,
    pub m: Option<usize>,
    pub kernel: KernelSpec,
    pub score_variant: String,
    pub seed: u64,
}

/// Pieces of the Stein kernel for one ordered pair, with `r = x − y`.
struct PairTerms {
    u: f64,
    phi: f64,
    d1: f64,
    /// `∂u/∂r`
    du_dr_scale: f64,
}

/// `u_q(x, y)` from the radial profile. For `k = φ(‖r‖²)`:
/// `u = φ sₓ·s_y + 2φ′ r·(s_y − sₓ) − 4φ″‖r‖² − 2dφ′`.
#[inline]
fn stein_u_pair(kernel: &KernelSpec, x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> f64 {
    let mut rho = 0.0;
    let mut ss = 0.0;
    let mut rds = 0.0;
    for k in 0..x.len() {
        let r = x[k] - y[k];
        rho += r * r;
        ss += sx[k] * sy[k];
        rds += r * (sy[k] - sx[k]);
    }
    let p = kernel.profile(rho);
    p.phi * ss + 2.0 * p.d1 * rds - 4.0 * p.d2 * rho - 2.0 * x.len() as f64 * p.d1
}

#[inline]
fn stein_pair_terms(kernel: &KernelSpec, x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> PairTerms {
    let d = x.len() as f64;
    let mut rho = 0.0;
    let mut ss = 0.0;
    let mut rds = 0.0;
    for k in 0..x.len() {
        let r = x[k] - y[k];
        rho += r * r;
        ss += sx[k] * sy[k];
        rds += r * (sy[k] - sx[k]);
    }
    let p = kernel.profile(rho);
    let u = p.phi * ss + 2.0 * p.d1 * rds - 4.0 * p.d2 * rho - 2.0 * d * p.d1;
    // ∂u/∂r = r·B + 2φ′(s_y − sₓ)
    let b = 2.0 * p.d1 * ss + 4.0 * p.d2 * rds - 8.0 * p.d3 * rho - 8.0 * p.d2 - 4.0 * d * p.d2;
    PairTerms {
        u,
        phi: p.phi,
        d1: p.d1,
        du_dr_scale: b,
    }
}

fn check_score_dim<S: ScoreFunction + ?Sized>(score: &S, cols: usize) -> Result<()> {
    if score.dim() != cols {
        return Err(dim_mismatch(format!(
            "points have {cols} coordinates, score model {}",
            score.dim()
        )));
    }
    Ok(())
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Row indices sorted lexicographically; tied rows are bitwise identical.
fn canonical_order(x: &Mat) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| lex_cmp(x.row(a), x.row(b)));
    idx
}

/// The Stein kernel `u_q(x, x′)`.
pub fn stein_kernel_u<S: ScoreFunction + ?Sized>(kernel: &KernelSpec, score: &S, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(dim_mismatch(format!("pair of lengths {} and {}", x.len(), y.len())));
    }
    check_score_dim(score, x.len())?;
    Ok(stein_u_pair(kernel, x, y, &score.score(x), &score.score(y)))
}

/// `n × n` matrix of `u_q(x_i, x_j)`, diagonal included.
#[derive(Clone, Debug, PartialEq)]
pub struct SteinGram {
    mat: Mat,
    order: Vec<usize>,
}

impl SteinGram {
    pub fn new<S: ScoreFunction + ?Sized>(kernel: &KernelSpec, score: &S, x: &Mat) -> Result<Self> {
        check_score_dim(score, x.cols())?;
        SteinGram::from_scores(kernel, x, &score.score_batch(x))
    }

    pub fn from_scores(kernel: &KernelSpec, x: &Mat, scores: &Mat) -> Result<Self> {
        if x.shape() != scores.shape() {
            return Err(dim_mismatch("scores must match points row for row"));
        }
        let n = x.rows();
        let order = canonical_order(x);
        let mut mat = Mat::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let (i, j) = (order[a], order[b]);
                let v = stein_u_pair(kernel, x.row(i), x.row(j), scores.row(i), scores.row(j));
                mat[(i, j)] = v;
                mat[(j, i)] = v;
            }
        }
        if !mat.all_finite() {
            return Err(Error::DegenerateData("non-finite Stein kernel entry".into()));
        }
        Ok(SteinGram { mat, order })
    }

    pub fn matrix(&self) -> &Mat {
        &self.mat
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn v_statistic(&self) -> f64 {
        let n = self.n();
        let o = &self.order;
        let rows: Vec<f64> = (0..n)
            .map(|a| (a + 1..n).fold(self.mat[(o[a], o[a])], |acc, b| acc + 2.0 * self.mat[(o[a], o[b])]))
            .collect();
        tree_sum(&rows) / (n * n) as f64
    }

    pub fn u_estimate(&self) -> Result<SteinEstimate> {
        let n = self.n();
        let o = &self.order;
        let mut acc = PairAccumulator::new(n);
        for a in 0..n {
            for b in (a + 1)..n {
                acc.push(a, self.mat[(o[a], o[b])]);
            }
        }
        acc.finish(n)
    }
}

/// Per-row sums over unordered off-diagonal pairs `(a, b > a)`.
struct PairAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    pairs: usize,
}

impl PairAccumulator {
    fn new(n: usize) -> Self {
        PairAccumulator {
            sum: vec![0.0; n],
            sum_sq: vec![0.0; n],
            pairs: 0,
        }
    }

    #[inline]
    fn push(&mut self, row: usize, u: f64) {
        self.sum[row] += u;
        self.sum_sq[row] += u * u;
        self.pairs += 1;
    }

    fn finish(self, n: usize) -> Result<SteinEstimate> {
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let (s, s2) = (tree_sum(&self.sum), tree_sum(&self.sum_sq));
        if !s.is_finite() || !s2.is_finite() {
            return Err(Error::DegenerateData("non-finite Stein kernel entry".into()));
        }
        let pairs = self.pairs as f64;
        let value = s / pairs;
        // each unordered pair is two equal off-diagonal entries
        let ordered = 2.0 * pairs;
        let u_variance = if ordered > 1.0 {
            ((2.0 * s2 - 2.0 * s * s / pairs) / (ordered - 1.0)).max(0.0)
        } else {
            0.0
        };
        Ok(SteinEstimate {
            value,
            u_variance,
            std_error: (2.0 * u_variance / n as f64).sqrt(),
            n,
            m: None,
        })
    }
}

/// Off-diagonal mean of the Stein Gram matrix, without storing it.
pub fn ksd_u_statistic<S: ScoreFunction + ?Sized>(kernel: &KernelSpec, score: &S, x: &Mat) -> Result<SteinEstimate> {
    check_score_dim(score, x.cols())?;
    if x.rows() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: x.rows() });
    }
    ksd_u_from_scores(kernel, x, &score.score_batch(x))
}

/// [`ksd_u_statistic`] with the scores of the rows of `x` already evaluated.
pub fn ksd_u_from_scores(kernel: &KernelSpec, x: &Mat, scores: &Mat) -> Result<SteinEstimate> {
    if x.shape() != scores.shape() {
        return Err(dim_mismatch("scores must match points row for row"));
    }
    let n = x.rows();
    let order = canonical_order(x);
    let x = x.select_rows(&order);
    let scores = scores.select_rows(&order);
    let mut acc = PairAccumulator::new(n);
    for i in 0..n {
        let (xi, si) = (x.row(i), scores.row(i));
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for j in (i + 1)..n {
            let u = stein_u_pair(kernel, xi, x.row(j), si, scores.row(j));
            sum += u;
            sum_sq += u * u;
        }
        acc.sum[i] = sum;
        acc.sum_sq[i] = sum_sq;
        acc.pairs += n - i - 1;
    }
    acc.finish(n)
}

/// Full-matrix mean of the Stein Gram matrix.
pub fn ksd_v_statistic<S: ScoreFunction + ?Sized>(kernel: &KernelSpec, score: &S, x: &Mat) -> Result<f64> {
    check_score_dim(score, x.cols())?;
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let order = canonical_order(x);
    let x = x.select_rows(&order);
    let s = score.score_batch(&x);
    let rows: Vec<f64> = (0..n)
        .map(|i| {
            let (xi, si) = (x.row(i), s.row(i));
            let mut acc = stein_u_pair(kernel, xi, xi, si, si);
            for j in (i + 1)..n {
                acc += 2.0 * stein_u_pair(kernel, xi, x.row(j), si, s.row(j));
            }
            acc
        })
        .collect();
    Ok(tree_sum(&rows) / (n * n) as f64)
}

/// V-statistic and its gradient with respect to every row of `x`, including
/// the dependence of the score on the points.
pub fn ksd_v_with_grad<S: ScoreFunction + ?Sized>(kernel: &KernelSpec, score: &S, x: &Mat) -> Result<(f64, Mat)> {
    check_score_dim(score, x.cols())?;
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let s = score.score_batch(x);
    let mut rows = vec![0.0; n];
    let mut gx = Mat::zeros(n, d);
    let mut gs = Mat::zeros(n, d);
    let phi0 = kernel.profile(0.0);
    for i in 0..n {
        let (xi, si) = (x.row(i), s.row(i));
        rows[i] += stein_u_pair(kernel, xi, xi, si, si);
        for k in 0..d {
            gs[(i, k)] += 2.0 * phi0.phi * si[k];
        }
        for j in (i + 1)..n {
            let (xj, sj) = (x.row(j), s.row(j));
            let t = stein_pair_terms(kernel, xi, xj, si, sj);
            rows[i] += 2.0 * t.u;
            for k in 0..d {
                let r = xi[k] - xj[k];
                let du_dr = r * t.du_dr_scale + 2.0 * t.d1 * (sj[k] - si[k]);
                gx[(i, k)] += 2.0 * du_dr;
                gx[(j, k)] -= 2.0 * du_dr;
                gs[(i, k)] += 2.0 * (t.phi * sj[k] - 2.0 * t.d1 * r);
                gs[(j, k)] += 2.0 * (t.phi * si[k] + 2.0 * t.d1 * r);
            }
        }
    }
    let inv = 1.0 / (n * n) as f64;
    gx.scale(inv);
    gs.scale(inv);
    let through_score = score.score_vjp_batch(x, &gs);
    gx.add_assign(&through_score)?;
    Ok((tree_sum(&rows) * inv, gx))
}

/// Tikhonov-filtered KSD: with `G/n = Σ sᵢ vᵢvᵢᵀ`, returns
/// `Σ sᵢ²/(sᵢ+λ) · (1ᵀvᵢ)² / n`, which is the V-statistic at `λ = 0`.
/// Negative round-off eigenvalues are dropped at `λ = 0`; for `λ > 0` the
/// value comes from a Cholesky solve whenever `G/n + λI` admits one.
pub fn regularized_ksd<S: ScoreFunction + ?Sized>(kernel: &KernelSpec, score: &S, x: &Mat, lambda: f64) -> Result<f64> {
    if x.rows() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: x.rows() });
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parse(format!("regularization must be non-negative, got {lambda}")));
    }
    let gram = SteinGram::new(kernel, score, x)?;
    regularized_from_gram(&gram, lambda)
}

pub fn regularized_from_gram(gram: &SteinGram, lambda: f64) -> Result<f64> {
    let n = gram.n();
    let mut scaled = gram.matrix().clone();
    scaled.scale(1.0 / n as f64);
    if lambda > 0.0 {
        // Σ s²/(s+λ)(1ᵀv)² = 1ᵀA(A+λI)⁻¹A1; valid whenever A + λI factors
        // without jitter, i.e. every round-off eigenvalue exceeds −λ.
        let mut shifted = scaled.clone();
        for i in 0..n {
            shifted[(i, i)] += lambda;
        }
        if let Ok(f) = spd_factor(&shifted, 0.0) {
            if f.jitter() == 0.0 {
                let a1: Vec<f64> = (0..n).map(|i| tree_sum(scaled.row(i))).collect();
                let sol = spd_solve(&f, &a1)?;
                let terms: Vec<f64> = a1.iter().zip(&sol).map(|(p, q)| p * q).collect();
                return Ok(tree_sum(&terms) / n as f64);
            }
        }
    }
    let eig = sym_eigen(&scaled)?;
    let terms: Vec<f64> = eig
        .values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(i, &s)| {
            let proj = tree_sum(&eig.vectors.col(i));
            s * s / (s + lambda) * proj * proj
        })
        .collect();
    Ok(tree_sum(&terms) / n as f64)
}

/// `𝒜_q f(x) = f(x)ᵀ s_q(x) + ∇·f(x)`.
pub fn apply_stein_operator<S: ScoreFunction + ?Sized>(score: &S, f: &Mlp, x: &[f64]) -> Result<f64> {
    let row = Mat::new(1, x.len(), x.to_vec())?;
    Ok(stein_operator_batch(score, f, &row)?[0])
}

pub fn stein_operator_batch<S: ScoreFunction + ?Sized>(score: &S, f: &Mlp, x: &Mat) -> Result<Vec<f64>> {
    check_score_dim(score, x.cols())?;
    if f.input_dim() != x.cols() || f.output_dim() != x.cols() {
        return Err(dim_mismatch(format!(
            "critic maps {} to {} but points have {} coordinates",
            f.input_dim(),
            f.output_dim(),
            x.cols()
        )));
    }
    let out = f.forward(x)?;
    let div = mlp_divergence(f, x)?;
    let s = score.score_batch(x);
    Ok((0..x.rows())
        .map(|i| out.row(i).iter().zip(s.row(i)).map(|(a, b)| a * b).sum::<f64>() + div[i])
        .collect())
}

/// Unbiased two-sample MMD² with first-order standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub r: usize,
}

/// `mean_{i≠j} k(xᵢ,xⱼ) − 2 mean k(xᵢ,yₗ) + mean_{l≠l′} k(yₗ,yₗ′)` for any
/// symmetric `k`, including the Stein kernel via [`stein_augment`].
pub fn mmd_u_statistic<K: Fn(&[f64], &[f64]) -> f64>(k: K, x: &Mat, y: &Mat) -> Result<MmdEstimate> {
    let (n, r) = (x.rows(), y.rows());
    if n < 2 || r < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n.min(r) });
    }
    if x.cols() != y.cols() {
        return Err(dim_mismatch("samples have different dimensions"));
    }
    let x = x.select_rows(&canonical_order(x));
    let y = y.select_rows(&canonical_order(y));
    let mut xx_rows = vec![0.0; n];
    let mut yy_rows = vec![0.0; r];
    let mut xy_by_x = vec![0.0; n];
    let mut xy_by_y = vec![0.0; r];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = k(x.row(i), x.row(j));
            xx_rows[i] += v;
            xx_rows[j] += v;
        }
        for l in 0..r {
            let v = k(x.row(i), y.row(l));
            xy_by_x[i] += v;
            xy_by_y[l] += v;
        }
    }
    for l in 0..r {
        for m in (l + 1)..r {
            let v = k(y.row(l), y.row(m));
            yy_rows[l] += v;
            yy_rows[m] += v;
        }
    }
    let total = |rows: &[f64]| tree_sum(rows);
    let (nf, rf) = (n as f64, r as f64);
    let xx = total(&xx_rows) / (nf * (nf - 1.0));
    let yy = total(&yy_rows) / (rf * (rf - 1.0));
    let xy = total(&xy_by_x) / (nf * rf);
    let a: Vec<f64> = (0..n)
        .map(|i| xx_rows[i] / (nf - 1.0) - xy_by_x[i] / rf)
        .collect();
    let b: Vec<f64> = (0..r)
        .map(|l| yy_rows[l] / (rf - 1.0) - xy_by_y[l] / nf)
        .collect();
    let (_, va) = mean_var(&a);
    let (_, vb) = mean_var(&b);
    Ok(MmdEstimate {
        value: xx - 2.0 * xy + yy,
        std_error: (4.0 * va / nf + 4.0 * vb / rf).sqrt(),
        n,
        r,
    })
}

/// Bootstrap standard error of [`mmd_u_statistic`]: rows of both samples are
/// resampled with replacement and pairs of copies of one row are excluded.
pub fn mmd_bootstrap_std_error<K: Fn(&[f64], &[f64]) -> f64>(
    k: K,
    x: &Mat,
    y: &Mat,
    resamples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let (n, r) = (x.rows(), y.rows());
    if n < 2 || r < 2 || resamples < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n.min(r).min(resamples) });
    }
    let kxx = Mat::from_fn(n, n, |i, j| if i == j { 0.0 } else { k(x.row(i), x.row(j)) });
    let kyy = Mat::from_fn(r, r, |i, j| if i == j { 0.0 } else { k(y.row(i), y.row(j)) });
    let kxy = Mat::from_fn(n, r, |i, l| k(x.row(i), y.row(l)));
    let counts = |size: usize, rng: &mut RngStream| {
        let mut c = vec![0.0; size];
        for _ in 0..size {
            c[rng.below(size)] += 1.0;
        }
        c
    };
    let quad = |m: &Mat, a: &[f64], b: &[f64]| {
        let terms: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, ai)| ai * m.row(i).iter().zip(b).map(|(v, bj)| v * bj).sum::<f64>())
            .collect();
        tree_sum(&terms)
    };
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let cx = counts(n, rng);
        let cy = counts(r, rng);
        let px = (n * n) as f64 - cx.iter().map(|c| c * c).sum::<f64>();
        let py = (r * r) as f64 - cy.iter().map(|c| c * c).sum::<f64>();
        if px <= 0.0 || py <= 0.0 {
            continue;
        }
        let v = quad(&kxx, &cx, &cx) / px - 2.0 * quad(&kxy, &cx, &cy) / (n * r) as f64 + quad(&kyy, &cy, &cy) / py;
        stats.push(v);
    }
    Ok(mean_var(&stats).1.sqrt())
}

/// Rows `[x | s_q(x)]`, the input [`augmented_stein_kernel`] expects.
pub fn stein_augment<S: ScoreFunction + ?Sized>(score: &S, x: &Mat) -> Result<Mat> {
    check_score_dim(score, x.cols())?;
    let s = score.score_batch(x);
    let d = x.cols();
    Ok(Mat::from_fn(x.rows(), 2 * d, |i, j| if j < d { x[(i, j)] } else { s[(i, j - d)] }))
}

/// The Stein kernel as a plain two-argument kernel on augmented rows.
pub fn augmented_stein_kernel(kernel: KernelSpec) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |a, b| {
        let d = a.len() / 2;
        stein_u_pair(&kernel, &a[..d], &b[..d], &a[d..], &b[d..])
    }
}

/// Outcome of critic ascent.
#[derive(Clone, Debug)]
pub struct AdversarialEstimate {
    /// Batch mean of `𝒜_q f` after the last ascent step.
    pub value: f64,
    /// Batch mean before any step, then after each step.
    pub trace: Vec<f64>,
    pub critic: Mlp,
}

fn critic_objective(pass_outputs: &Mat, divergence: &[f64], w: &Mat) -> f64 {
    let terms: Vec<f64> = (0..w.rows())
        .map(|i| pass_outputs.row(i).iter().zip(w.row(i)).map(|(a, b)| a * b).sum::<f64>() + divergence[i])
        .collect();
    tree_sum(&terms) / w.rows() as f64
}

/// Runs `ascent_steps` SGD ascents of `mean 𝒜_q f(x)` over the critic's
/// parameters (the optimiser's weight decay bounds the critic).
pub fn adversarial_stein_estimate<S: ScoreFunction + ?Sized>(
    score: &S,
    critic: Mlp,
    x: &Mat,
    ascent_steps: usize,
    sgd: &mut SgdState,
) -> Result<AdversarialEstimate> {
    check_score_dim(score, x.cols())?;
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let s = score.score_batch(x);
    let mut critic = critic;
    let mut trace = Vec::with_capacity(ascent_steps + 1);
    for step in 0..=ascent_steps {
        let mut pass = stein_critic_pass(&critic, x, &s)?;
        trace.push(critic_objective(&pass.outputs, &pass.divergence, &s));
        if step == ascent_steps {
            break;
        }
        pass.param_grads.scale(-1.0);
        sgd_step(sgd, &mut critic, &pass.param_grads)?;
    }
    Ok(AdversarialEstimate {
        value: *trace.last().expect("at least one evaluation"),
        trace,
        critic,
    })
}

/// `mean 𝒜_q f(z)` for a fixed critic and its gradient with respect to every
/// row of `z`, including the dependence of the score on the points.
pub fn adversarial_feature_loss<S: ScoreFunction + ?Sized>(score: &S, critic: &Mlp, z: &Mat) -> Result<(f64, Mat)> {
    check_score_dim(score, z.cols())?;
    let n = z.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let s = score.score_batch(z);
    let pass = stein_critic_pass(critic, z, &s)?;
    let value = critic_objective(&pass.outputs, &pass.divergence, &s);
    let mut f_over_n = pass.outputs.clone();
    f_over_n.scale(1.0 / n as f64);
    let mut grad = pass.input_grads;
    grad.add_assign(&score.score_vjp_batch(z, &f_over_n))?;
    Ok((value, grad))
}
