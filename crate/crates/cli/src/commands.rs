use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steinda_core::discrepancy::{ksd_u_statistic, ksd_v_statistic, regularized_ksd, SteinRecord};
use steinda_core::inference::{
    convergence_experiment, imbalance_sweep, stein_identity_diagnostic, two_sample_test, ConvergenceConfig, RateFit,
    RateRow, SweepConfig, SweepRow, TestResult, TwoSampleConfig,
};
use steinda_core::io::{read_datasets_file, write_datasets_file, DomainSplit};
use steinda_core::kernels::KernelSpec;
use steinda_core::score::{fit_score_model, GaussianModel, ScoreFamily, ScoreFitParams, ScoreModel};
use steinda_core::uda::{
    evaluate, make_blob_shift, make_two_moons, prepare_data, run_uda, split_target, DataSpec, Dataset, Domain,
    TrainConfig, UdaModel,
};
use steinda_core::RngStream;

use crate::config::{config_base, load_or_default, resolve_path, write_json, CliError, CliResult, Outputs};
use crate::{
    BlobShiftArgs, Command, Common, DiagArgs, DiagCommand, GenCommand, KernelFlags, KsdArgs, RateArgs, SweepArgs,
    SweepCommand, TargetFlags, TestCommand, TwoMoonsArgs, TwoSampleArgs, UdaCommand, UdaEvalArgs, UdaTrainArgs,
};

pub(crate) fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Ksd(a) => ksd(a),
        Command::Diag(DiagCommand::SteinIdentity(a)) => diag_stein_identity(a),
        Command::Test(TestCommand::TwoSample(a)) => test_two_sample(a),
        Command::Rate(a) => rate(a),
        Command::Sweep(SweepCommand::Imbalance(a)) => sweep_imbalance(a),
        Command::Gen(GenCommand::TwoMoons(a)) => gen_two_moons(a),
        Command::Gen(GenCommand::BlobShift(a)) => gen_blob_shift(a),
        Command::Uda(UdaCommand::Train(a)) => uda_train(a),
        Command::Uda(UdaCommand::Eval(a)) => uda_eval(a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_kernel(kernel: &mut KernelSpec, flags: &KernelFlags) -> CliResult<()> {
    set(&mut kernel.family, flags.kernel);
    set(&mut kernel.bandwidth, flags.bandwidth);
    *kernel = KernelSpec::new(kernel.family, kernel.bandwidth).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(())
}

fn apply_target(percent: &mut f64, minimum: &mut usize, flags: &TargetFlags) -> CliResult<()> {
    set(percent, flags.target_percent);
    set(minimum, flags.target_min);
    if !(*percent > 0.0 && *percent <= 1.0) || *minimum == 0 {
        return Err(CliError::Usage(format!(
            "target percent must lie in (0, 1] and minimum be positive, got {percent} and {minimum}"
        )));
    }
    Ok(())
}

fn usage(e: steinda_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn read_data(path: &str) -> CliResult<DomainSplit> {
    read_datasets_file(Path::new(path)).map_err(|e| match e {
        steinda_core::Error::Parse(msg) => CliError::Data(format!("{path}: {msg}")),
        other => CliError::Data(format!("{path}: {other}")),
    })
}

fn domain_rows(split: &DomainSplit, domain: Domain, path: &str) -> CliResult<Dataset> {
    let rows = match domain {
        Domain::Source => split.source.clone(),
        Domain::Target => split.target.clone(),
    };
    rows.ok_or_else(|| CliError::Data(format!("{path}: no {domain} rows")))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &str, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{path}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{what} {path}: {e}")))
}

/// Loads the config, lets `adjust` apply flags and resolve paths, then
/// writes the echo before anything runs.
fn resolve<T>(common: &Common, adjust: impl FnOnce(&mut T, &Path) -> CliResult<()>) -> CliResult<(T, Outputs)>
where
    T: for<'de> Deserialize<'de> + Serialize + Default,
{
    let mut cfg: T = load_or_default(common.config.as_deref())?;
    adjust(&mut cfg, &config_base(common.config.as_deref()))?;
    let out = Outputs::create(&common.out)?;
    out.json("config.resolved.json", &cfg)?;
    Ok((cfg, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct KsdConfig {
    seed: u64,
    data: String,
    /// Score-model JSON; when absent a model is fitted to target rows.
    model: Option<String>,
    domain: Domain,
    score: ScoreFamily,
    fit: ScoreFitParams,
    kernel: KernelSpec,
    target_percent: f64,
    target_min: usize,
    reg_lambda: Option<f64>,
}

impl Default for KsdConfig {
    fn default() -> Self {
        KsdConfig {
            seed: 0,
            data: String::new(),
            model: None,
            domain: Domain::Source,
            score: ScoreFamily::Gaussian,
            fit: ScoreFitParams::default(),
            kernel: KernelSpec::default(),
            target_percent: 1.0,
            target_min: 2,
            reg_lambda: None,
        }
    }
}

#[derive(Serialize)]
struct RegularizedValue {
    lambda: f64,
    value: f64,
}

#[derive(Serialize)]
struct KsdOutput {
    estimate: SteinRecord,
    v_statistic: f64,
    regularized: Option<RegularizedValue>,
}

fn ksd(a: KsdArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common, |c: &mut KsdConfig, base| {
        set(&mut c.seed, a.common.seed);
        apply_kernel(&mut c.kernel, &a.kernel)?;
        apply_target(&mut c.target_percent, &mut c.target_min, &a.target)?;
        set(&mut c.domain, a.domain);
        set(&mut c.score, a.score);
        if a.reg_lambda.is_some() {
            c.reg_lambda = a.reg_lambda;
        }
        if let Some(l) = c.reg_lambda {
            if l.is_nan() || l < 0.0 {
                return Err(CliError::Usage(format!("reg_lambda must be non-negative, got {l}")));
            }
        }
        c.data = match &a.data {
            Some(p) => resolve_path(Path::new("."), p)?,
            None => resolve_path(base, &c.data)?,
        };
        c.model = match (&a.model, &c.model) {
            (Some(p), _) => Some(resolve_path(Path::new("."), p)?),
            (None, Some(p)) => Some(resolve_path(base, p)?),
            (None, None) => None,
        };
        Ok(())
    })?;
    let rng = RngStream::new(cfg.seed);
    let split = read_data(&cfg.data)?;
    let x = domain_rows(&split, cfg.domain, &cfg.data)?;
    let (model, m) = match &cfg.model {
        Some(p) => (read_json::<ScoreModel>(p, "score model")?, None),
        None => {
            let pool = domain_rows(&split, Domain::Target, &cfg.data)?;
            let (z, _) = split_target(&pool, cfg.target_percent, cfg.target_min, &mut rng.split(1))?;
            let model = fit_score_model(cfg.score, z.features(), &cfg.fit, &mut rng.split(2))?;
            out.json("model.json", &model)?;
            (model, Some(z.len()))
        }
    };
    let frozen = model.freeze(&mut rng.split(3));
    let mut est = ksd_u_statistic(&cfg.kernel, &frozen, x.features())?;
    if let Some(m) = m {
        est = est.with_target_size(m);
    }
    let v_statistic = ksd_v_statistic(&cfg.kernel, &frozen, x.features())?;
    let regularized = match cfg.reg_lambda {
        Some(lambda) => Some(RegularizedValue {
            lambda,
            value: regularized_ksd(&cfg.kernel, &frozen, x.features(), lambda)?,
        }),
        None => None,
    };
    out.json(
        "result.json",
        &KsdOutput {
            estimate: est.record(&cfg.kernel, &model.family().to_string(), cfg.seed),
            v_statistic,
            regularized,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DiagConfig {
    seed: u64,
    /// Score-model JSON; when absent a standard Gaussian of `dim` dimensions.
    model: Option<String>,
    dim: usize,
    n: usize,
    seeds: usize,
    kernel: KernelSpec,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            seed: 0,
            model: None,
            dim: 2,
            n: 5000,
            seeds: 10,
            kernel: KernelSpec::default(),
        }
    }
}

#[derive(Serialize)]
struct DiagRow {
    seed: u64,
    value: f64,
    std_error: f64,
    u_variance: f64,
}

fn diag_stein_identity(a: DiagArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common, |c: &mut DiagConfig, base| {
        set(&mut c.seed, a.common.seed);
        apply_kernel(&mut c.kernel, &a.kernel)?;
        set(&mut c.n, a.n);
        set(&mut c.seeds, a.seeds);
        c.model = match (&a.model, &c.model) {
            (Some(p), _) => Some(resolve_path(Path::new("."), p)?),
            (None, Some(p)) => Some(resolve_path(base, p)?),
            (None, None) => None,
        };
        if c.seeds == 0 || c.n < 2 || c.dim == 0 {
            return Err(CliError::Usage("need seeds ≥ 1, n ≥ 2 and dim ≥ 1".into()));
        }
        Ok(())
    })?;
    let model = match &cfg.model {
        Some(p) => read_json::<ScoreModel>(p, "score model")?,
        None => ScoreModel::Gaussian(GaussianModel::standard(cfg.dim)),
    };
    let rng = RngStream::new(cfg.seed);
    let frozen = model.freeze(&mut rng.split(0));
    let seeds: Vec<u64> = (0..cfg.seeds).map(|k| rng.split(1).split(k as u64).seed()).collect();
    let report = stein_identity_diagnostic(&frozen, &cfg.kernel, |n, r| model.sample(n, r), cfg.n, &seeds)?;
    let rows: Vec<DiagRow> = report
        .seeds
        .iter()
        .zip(&report.estimates)
        .map(|(&seed, e)| DiagRow {
            seed,
            value: e.value,
            std_error: e.std_error,
            u_variance: e.u_variance,
        })
        .collect();
    out.csv("trace.csv", &rows)?;
    out.json("result.json", &report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TwoSampleCliConfig {
    seed: u64,
    data: String,
    score: ScoreFamily,
    fit: ScoreFitParams,
    kernel: KernelSpec,
    alpha: f64,
    null_draws: usize,
    target_percent: f64,
    target_min: usize,
}

impl Default for TwoSampleCliConfig {
    fn default() -> Self {
        TwoSampleCliConfig {
            seed: 0,
            data: String::new(),
            score: ScoreFamily::Gaussian,
            fit: ScoreFitParams::default(),
            kernel: KernelSpec::default(),
            alpha: 0.05,
            null_draws: 100,
            target_percent: 1.0,
            target_min: 2,
        }
    }
}

#[derive(Serialize)]
struct TwoSampleOutput {
    n: usize,
    m: usize,
    #[serde(flatten)]
    test: TestResult,
}

fn test_two_sample(a: TwoSampleArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common, |c: &mut TwoSampleCliConfig, base| {
        set(&mut c.seed, a.common.seed);
        apply_kernel(&mut c.kernel, &a.kernel)?;
        apply_target(&mut c.target_percent, &mut c.target_min, &a.target)?;
        set(&mut c.score, a.score);
        set(&mut c.alpha, a.alpha);
        set(&mut c.null_draws, a.null_draws);
        c.data = match &a.data {
            Some(p) => resolve_path(Path::new("."), p)?,
            None => resolve_path(base, &c.data)?,
        };
        Ok(())
    })?;
    let rng = RngStream::new(cfg.seed);
    let split = read_data(&cfg.data)?;
    let x = domain_rows(&split, Domain::Source, &cfg.data)?;
    let pool = domain_rows(&split, Domain::Target, &cfg.data)?;
    let (z, _) = split_target(&pool, cfg.target_percent, cfg.target_min, &mut rng.split(1))?;
    let test_cfg = TwoSampleConfig {
        family: cfg.score,
        fit: cfg.fit.clone(),
        kernel: cfg.kernel,
        alpha: cfg.alpha,
        null_draws: cfg.null_draws,
    };
    let test = two_sample_test(x.features(), z.features(), &test_cfg, &mut rng.split(2)).map_err(|e| match e {
        steinda_core::Error::Parse(_) | steinda_core::Error::UnsupportedVariant(_) => usage(e),
        other => other.into(),
    })?;
    out.json(
        "result.json",
        &TwoSampleOutput {
            n: x.len(),
            m: z.len(),
            test,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RateConfig {
    seed: u64,
    p_mean: f64,
    p_var: f64,
    q_mean: f64,
    q_var: f64,
    kernel: KernelSpec,
    n_grid: Vec<usize>,
    m_grid: Vec<usize>,
    reps: usize,
    n_fixed: usize,
    quadrature_nodes: usize,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            seed: 0,
            p_mean: 0.0,
            p_var: 0.5,
            q_mean: 0.0,
            q_var: 1.0,
            kernel: KernelSpec::default(),
            n_grid: vec![50, 100, 200, 400, 800, 1600],
            m_grid: vec![32, 64, 128, 256, 512, 1024],
            reps: 50,
            n_fixed: 1000,
            quadrature_nodes: 64,
        }
    }
}

#[derive(Serialize)]
struct RateOutput {
    ground_truth: f64,
    n_fit: RateFit,
    m_fit: RateFit,
}

fn gaussian_1d(mean: f64, var: f64) -> CliResult<GaussianModel> {
    let cov = steinda_core::Mat::from_diag(&[var]);
    GaussianModel::new(vec![mean], cov).map_err(usage)
}

fn rate(a: RateArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common, |c: &mut RateConfig, _| {
        set(&mut c.seed, a.common.seed);
        apply_kernel(&mut c.kernel, &a.kernel)?;
        set(&mut c.reps, a.reps);
        Ok(())
    })?;
    let p = gaussian_1d(cfg.p_mean, cfg.p_var)?;
    let q = gaussian_1d(cfg.q_mean, cfg.q_var)?;
    let study = ConvergenceConfig {
        kernel: cfg.kernel,
        n_grid: cfg.n_grid.clone(),
        m_grid: cfg.m_grid.clone(),
        reps: cfg.reps,
        n_fixed: cfg.n_fixed,
        quadrature_nodes: cfg.quadrature_nodes,
    };
    let outcome = convergence_experiment(&p, &q, &study, &RngStream::new(cfg.seed)).map_err(|e| match e {
        steinda_core::Error::Parse(_) | steinda_core::Error::TooFewSamples { .. } => usage(e),
        other => other.into(),
    })?;
    out.csv::<RateRow>("trace.csv", &outcome.rows)?;
    out.json(
        "result.json",
        &RateOutput {
            ground_truth: outcome.ground_truth,
            n_fit: outcome.n_fit,
            m_fit: outcome.m_fit,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepCliConfig {
    seed: u64,
    dim: usize,
    n_fixed: usize,
    m_grid: Vec<usize>,
    trials: usize,
    shift: f64,
    alpha: f64,
    null_draws: usize,
    permutations: usize,
    kernel: KernelSpec,
}

impl Default for SweepCliConfig {
    fn default() -> Self {
        SweepCliConfig {
            seed: 0,
            dim: 1,
            n_fixed: 1000,
            m_grid: vec![10, 25, 50],
            trials: 20,
            shift: 0.5,
            alpha: 0.05,
            null_draws: 100,
            permutations: 200,
            kernel: KernelSpec::default(),
        }
    }
}

#[derive(Serialize)]
struct SweepOutput {
    rows: Vec<SweepRow>,
}

fn sweep_imbalance(a: SweepArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common, |c: &mut SweepCliConfig, _| {
        set(&mut c.seed, a.common.seed);
        apply_kernel(&mut c.kernel, &a.kernel)?;
        set(&mut c.trials, a.trials);
        Ok(())
    })?;
    let sweep = SweepConfig {
        dim: cfg.dim,
        n_fixed: cfg.n_fixed,
        m_grid: cfg.m_grid.clone(),
        trials: cfg.trials,
        shift: cfg.shift,
        alpha: cfg.alpha,
        null_draws: cfg.null_draws,
        permutations: cfg.permutations,
        kernel: cfg.kernel,
    };
    let (rows, trials) = imbalance_sweep(&sweep, &RngStream::new(cfg.seed)).map_err(|e| match e {
        steinda_core::Error::Parse(_) | steinda_core::Error::TooFewSamples { .. } => usage(e),
        other => other.into(),
    })?;
    out.csv("trace.csv", &trials)?;
    out.json("result.json", &SweepOutput { rows })
}

/// `d.csv` → `d.config.resolved.json`, in the same directory.
fn gen_echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.config.resolved.json"))
}

fn gen_prepare<T>(a: &crate::GenFlags, adjust: impl FnOnce(&mut T) -> CliResult<()>) -> CliResult<T>
where
    T: for<'de> Deserialize<'de> + Serialize + Default,
{
    let mut cfg: T = load_or_default(a.config.as_deref())?;
    adjust(&mut cfg)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    }
    write_json(&gen_echo_path(&a.out), &cfg)?;
    Ok(cfg)
}

fn write_csv(path: &Path, sets: &[&Dataset]) -> CliResult<()> {
    write_datasets_file(path, sets).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TwoMoonsConfig {
    seed: u64,
    n: usize,
    noise: f64,
    rotation: f64,
}

impl Default for TwoMoonsConfig {
    fn default() -> Self {
        TwoMoonsConfig {
            seed: 0,
            n: 2000,
            noise: 0.1,
            rotation: 30.0,
        }
    }
}

fn gen_two_moons(a: TwoMoonsArgs) -> CliResult<()> {
    let cfg = gen_prepare(&a.gen, |c: &mut TwoMoonsConfig| {
        set(&mut c.seed, a.gen.seed);
        set(&mut c.n, a.n);
        set(&mut c.noise, a.noise);
        set(&mut c.rotation, a.rotation);
        Ok(())
    })?;
    let rng = RngStream::new(cfg.seed);
    let source = make_two_moons(cfg.n, cfg.noise, 0.0, &mut rng.split(0)).map_err(usage)?;
    let target = make_two_moons(cfg.n, cfg.noise, cfg.rotation, &mut rng.split(1))
        .map_err(usage)?
        .with_domain(Domain::Target);
    write_csv(&a.gen.out, &[&source, &target])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BlobShiftConfig {
    seed: u64,
    n: usize,
    d: usize,
    mean_shift: f64,
    cov_scale: f64,
    classes: usize,
}

impl Default for BlobShiftConfig {
    fn default() -> Self {
        BlobShiftConfig {
            seed: 0,
            n: 1000,
            d: 2,
            mean_shift: 2.0,
            cov_scale: 1.0,
            classes: 2,
        }
    }
}

fn gen_blob_shift(a: BlobShiftArgs) -> CliResult<()> {
    let cfg = gen_prepare(&a.gen, |c: &mut BlobShiftConfig| {
        set(&mut c.seed, a.gen.seed);
        set(&mut c.n, a.n);
        set(&mut c.d, a.d);
        set(&mut c.mean_shift, a.mean_shift);
        set(&mut c.cov_scale, a.cov_scale);
        set(&mut c.classes, a.classes);
        Ok(())
    })?;
    let (source, target) = make_blob_shift(
        cfg.n,
        cfg.d,
        cfg.mean_shift,
        cfg.cov_scale,
        cfg.classes,
        &mut RngStream::new(cfg.seed),
    )
    .map_err(usage)?;
    write_csv(&a.gen.out, &[&source, &target])
}

fn uda_train(a: UdaTrainArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common, |c: &mut TrainConfig, base| {
        set(&mut c.seed, a.common.seed);
        apply_kernel(&mut c.kernel, &a.kernel)?;
        apply_target(&mut c.target_percent, &mut c.target_min, &a.target)?;
        set(&mut c.score, a.score);
        set(&mut c.form, a.form);
        set(&mut c.lambda_max, a.lambda_max);
        set(&mut c.epochs, a.epochs);
        if let DataSpec::Csv { path } = &mut c.data {
            *path = resolve_path(base, path)?;
        }
        c.validate().map_err(usage)?;
        if c.epochs == 0 {
            return Err(CliError::Usage("epochs must be positive".into()));
        }
        Ok(())
    })?;
    let data = prepare_data(&cfg, None).map_err(|e| match e {
        steinda_core::Error::Io(_) | steinda_core::Error::Parse(_) => CliError::Data(e.to_string()),
        other => other.into(),
    })?;
    let run = run_uda(&data.source, &data.target_train, &data.target_test, &cfg)?;
    out.csv("trace.csv", &run.result.epochs)?;
    out.json("model.json", &run.best_model)?;
    out.json("result.json", &run.result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    model: String,
    data: String,
    domain: Domain,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: String::new(),
            data: String::new(),
            domain: Domain::Target,
        }
    }
}

#[derive(Serialize)]
struct EvalOutput {
    n: usize,
    accuracy: f64,
    error: f64,
}

fn uda_eval(a: UdaEvalArgs) -> CliResult<()> {
    if a.common.seed.is_some() {
        return Err(CliError::Usage("uda eval is deterministic and takes no seed".into()));
    }
    let (cfg, out) = resolve(&a.common, |c: &mut EvalConfig, base| {
        set(&mut c.domain, a.domain);
        c.model = match &a.model {
            Some(p) => resolve_path(Path::new("."), p)?,
            None => resolve_path(base, &c.model)?,
        };
        c.data = match &a.data {
            Some(p) => resolve_path(Path::new("."), p)?,
            None => resolve_path(base, &c.data)?,
        };
        Ok(())
    })?;
    let model: UdaModel = read_json(&cfg.model, "checkpoint")?;
    let rows = domain_rows(&read_data(&cfg.data)?, cfg.domain, &cfg.data)?;
    let eval = evaluate(&model, &rows)?;
    out.json(
        "result.json",
        &EvalOutput {
            n: rows.len(),
            accuracy: eval.accuracy,
            error: eval.error,
        },
    )
}
