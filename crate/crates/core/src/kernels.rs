//! Radial kernels and the analytic derivatives the Stein kernel needs.
//!
//! Both families are functions of `ρ = ‖x − x′‖²` only, `k = φ(ρ)`, so every
//! derivative follows from `φ` and its first three derivatives in `ρ`:
//!
//! * `∇ₓk = 2φ′(ρ)·(x − x′)`, `∇ₓ′k = −∇ₓk`
//! * `trace(∇ₓ∇ₓ′k) = −4ρφ″(ρ) − 2dφ′(ρ)`

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numeric::{sq_dist, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(−ρ/(2σ²))`
    Rbf,
    /// `(1 + ρ/(2σ²))^(−1/2)`
    Imq,
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Imq => "imq",
        })
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "imq" => Ok(KernelFamily::Imq),
            other => Err(Error::Parse(format!("unknown kernel family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            bandwidth: 1.0,
        }
    }
}

/// `φ(ρ)` and its first three derivatives.
#[derive(Clone, Copy, Debug)]
pub struct RadialProfile {
    pub phi: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Parse(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelSpec { family, bandwidth })
    }

    pub fn rbf(bandwidth: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            bandwidth,
        }
    }

    pub fn imq(bandwidth: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Imq,
            bandwidth,
        }
    }

    #[inline]
    pub fn profile(&self, rho: f64) -> RadialProfile {
        let c = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        match self.family {
            KernelFamily::Rbf => {
                let phi = (-c * rho).exp();
                RadialProfile {
                    phi,
                    d1: -c * phi,
                    d2: c * c * phi,
                    d3: -c * c * c * phi,
                }
            }
            KernelFamily::Imq => {
                let t = 1.0 + c * rho;
                let phi = 1.0 / t.sqrt();
                let phi3 = phi / t;
                let phi5 = phi3 / t;
                let phi7 = phi5 / t;
                RadialProfile {
                    phi,
                    d1: -0.5 * c * phi3,
                    d2: 0.75 * c * c * phi5,
                    d3: -1.875 * c * c * c * phi7,
                }
            }
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        self.profile(sq_dist(x, y)).phi
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(dim_mismatch(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(spec.eval_unchecked(x, y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelDerivatives {
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    /// `trace(∇ₓ∇ₓ′ k)`
    pub trace_mixed: f64,
}

pub fn kernel_derivatives(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<KernelDerivatives> {
    check_dims(x, y)?;
    let rho = sq_dist(x, y);
    let p = spec.profile(rho);
    let grad_x: Vec<f64> = x.iter().zip(y).map(|(a, b)| 2.0 * p.d1 * (a - b)).collect();
    let grad_y = grad_x.iter().map(|g| -g).collect();
    let d = x.len() as f64;
    Ok(KernelDerivatives {
        grad_x,
        grad_y,
        trace_mixed: -4.0 * rho * p.d2 - 2.0 * d * p.d1,
    })
}

pub fn gram_matrix(spec: &KernelSpec, x: &Mat) -> Mat {
    let n = x.rows();
    let mut g = Mat::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = spec.eval_unchecked(x.row(i), x.row(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Median pairwise Euclidean distance divided by `√2`.
pub fn median_heuristic(x: &Mat) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median == 0.0 {
        if dists[m - 1] == 0.0 {
            return Err(Error::DegenerateData("all points coincide".into()));
        }
        // more than half the pairs coincide; fall back to the mean distance
        return Ok(dists.iter().sum::<f64>() / m as f64 / std::f64::consts::SQRT_2);
    }
    Ok(median / std::f64::consts::SQRT_2)
}
