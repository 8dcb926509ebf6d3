//! `steinda` command line: Stein discrepancy estimates, diagnostics,
//! calibrated tests, rate studies, dataset generation and UDA training.
//!
//! Every run writes `config.resolved.json` (the fully resolved configuration,
//! seed included) next to its results; feeding that file back through
//! `--config` reproduces the results bitwise.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use steinda_core::kernels::KernelFamily;
use steinda_core::score::ScoreFamily;
use steinda_core::uda::{Domain, TransferForm};

mod commands;
pub mod config;

pub use config::{load_config, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "steinda", version, about = "Kernel Stein discrepancy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the KSD of dataset rows against a score model.
    Ksd(KsdArgs),
    /// Diagnostics.
    #[command(subcommand)]
    Diag(DiagCommand),
    /// Hypothesis tests.
    #[command(subcommand)]
    Test(TestCommand),
    /// Convergence-rate study on 1D Gaussians.
    Rate(RateArgs),
    /// Calibration sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Write a synthetic dataset CSV.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Domain adaptation.
    #[command(subcommand)]
    Uda(UdaCommand),
}

#[derive(Debug, Subcommand)]
enum DiagCommand {
    /// Stein identity check: KSD of samples drawn from the model itself.
    SteinIdentity(DiagArgs),
}

#[derive(Debug, Subcommand)]
enum TestCommand {
    /// KSD test of source rows against a model fitted to target rows.
    TwoSample(TwoSampleArgs),
}

#[derive(Debug, Subcommand)]
enum SweepCommand {
    /// Type-I error and power over target sample sizes.
    Imbalance(SweepArgs),
}

#[derive(Debug, Subcommand)]
enum GenCommand {
    /// Source moons plus a rotated target copy.
    TwoMoons(TwoMoonsArgs),
    /// Gaussian class blobs with a shifted, rescaled target.
    BlobShift(BlobShiftArgs),
}

#[derive(Debug, Subcommand)]
enum UdaCommand {
    /// Train and write the per-epoch log and best checkpoint.
    Train(UdaTrainArgs),
    /// Accuracy of a checkpoint on labeled rows.
    Eval(UdaEvalArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON configuration; flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "steinda-out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct KernelFlags {
    #[arg(long, value_name = "rbf|imq")]
    kernel: Option<KernelFamily>,
    #[arg(long, value_name = "FLOAT")]
    bandwidth: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct TargetFlags {
    #[arg(long, value_name = "FLOAT")]
    target_percent: Option<f64>,
    #[arg(long, value_name = "INT")]
    target_min: Option<usize>,
}

#[derive(Debug, Args)]
struct KsdArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    kernel: KernelFlags,
    #[command(flatten)]
    target: TargetFlags,
    /// Dataset CSV.
    #[arg(long, value_name = "PATH")]
    data: Option<String>,
    /// Score-model JSON; without it a model is fitted to the target rows.
    #[arg(long, value_name = "PATH")]
    model: Option<String>,
    /// Rows whose discrepancy is estimated.
    #[arg(long, value_name = "source|target")]
    domain: Option<Domain>,
    #[arg(long, value_name = "gaussian|gmm|vae")]
    score: Option<ScoreFamily>,
    /// Also report the spectrally regularized KSD at this level.
    #[arg(long, value_name = "FLOAT")]
    reg_lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct DiagArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    kernel: KernelFlags,
    /// Score-model JSON; defaults to a standard Gaussian.
    #[arg(long, value_name = "PATH")]
    model: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Number of independent replicates.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Debug, Args)]
struct TwoSampleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    kernel: KernelFlags,
    #[command(flatten)]
    target: TargetFlags,
    #[arg(long, value_name = "PATH")]
    data: Option<String>,
    #[arg(long, value_name = "gaussian|gmm|vae")]
    score: Option<ScoreFamily>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    null_draws: Option<usize>,
}

#[derive(Debug, Args)]
struct RateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    kernel: KernelFlags,
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    kernel: KernelFlags,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Args)]
struct GenFlags {
    /// JSON configuration; flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// CSV file to write; the resolved config goes alongside it.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TwoMoonsArgs {
    #[command(flatten)]
    gen: GenFlags,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Target rotation in degrees.
    #[arg(long)]
    rotation: Option<f64>,
}

#[derive(Debug, Args)]
struct BlobShiftArgs {
    #[command(flatten)]
    gen: GenFlags,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    mean_shift: Option<f64>,
    #[arg(long)]
    cov_scale: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct UdaTrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    kernel: KernelFlags,
    #[command(flatten)]
    target: TargetFlags,
    #[arg(long, value_name = "gaussian|gmm|vae")]
    score: Option<ScoreFamily>,
    #[arg(long, value_name = "kernelized|adversarial")]
    form: Option<TransferForm>,
    #[arg(long, value_name = "FLOAT")]
    lambda_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct UdaEvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `uda train`.
    #[arg(long, value_name = "PATH")]
    model: Option<String>,
    #[arg(long, value_name = "PATH")]
    data: Option<String>,
    #[arg(long, value_name = "source|target")]
    domain: Option<Domain>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
