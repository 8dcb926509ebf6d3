use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numeric::{Mat, RngStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    #[default]
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Parse(format!("unknown domain '{other}'"))),
        }
    }
}

/// Samples of one domain, with labels when known.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Mat,
    labels: Option<Vec<usize>>,
    domain: Domain,
}

impl Dataset {
    pub fn new(features: Mat, labels: Option<Vec<usize>>, domain: Domain) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(dim_mismatch(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// One more than the largest label, or 0 when unlabeled or empty.
    pub fn classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1)
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
        }
    }
}

/// Two interleaved unit half-circles with isotropic noise, rotated about
/// the sample centroid. The first `n/2` rows are moon 0.
pub fn make_two_moons(n: usize, noise: f64, rotation_deg: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Parse(format!("two-moons needs a positive even size, got {n}")));
    }
    if !(noise >= 0.0) || !rotation_deg.is_finite() {
        return Err(Error::Parse("noise must be non-negative and rotation finite".into()));
    }
    let half = n / 2;
    let mut x = Mat::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for moon in 0..2 {
        for i in 0..half {
            let t = if half == 1 { 0.0 } else { PI * i as f64 / (half - 1) as f64 };
            let (s, c) = t.sin_cos();
            let row = x.row_mut(moon * half + i);
            if moon == 0 {
                row[0] = c;
                row[1] = s;
            } else {
                row[0] = 1.0 - c;
                row[1] = 0.5 - s;
            }
            labels.push(moon);
        }
    }
    if noise > 0.0 {
        for v in x.data_mut() {
            *v += noise * rng.normal();
        }
    }
    // reduce first so that whole turns leave the points bitwise unchanged
    let deg = rotation_deg.rem_euclid(360.0);
    if deg != 0.0 {
        let (s, c) = deg.to_radians().sin_cos();
        let centre = x.col_means();
        for i in 0..n {
            let row = x.row_mut(i);
            let (dx, dy) = (row[0] - centre[0], row[1] - centre[1]);
            row[0] = centre[0] + c * dx - s * dy;
            row[1] = centre[1] + s * dx + c * dy;
        }
    }
    Dataset::new(x, Some(labels), Domain::Source)
}

/// Class-conditional unit Gaussians for the source, class `c` centred at
/// `6c` on the first axis (shifted to mean zero). The target adds
/// `mean_shift` to every coordinate and scales the covariance by
/// `cov_scale`. Row `i` has label `i mod classes`.
pub fn make_blob_shift(
    n: usize,
    d: usize,
    mean_shift: f64,
    cov_scale: f64,
    classes: usize,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Parse(format!("need at least 2 classes, got {classes}")));
    }
    if n == 0 || d == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(cov_scale > 0.0) || !mean_shift.is_finite() {
        return Err(Error::Parse("covariance scale must be positive and shift finite".into()));
    }
    let centre = |c: usize| 6.0 * c as f64 - 3.0 * (classes - 1) as f64;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let sd = cov_scale.sqrt();
    let mut src = Mat::zeros(n, d);
    let mut tgt = Mat::zeros(n, d);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..d {
            let mu = if j == 0 { centre(y) } else { 0.0 };
            src[(i, j)] = mu + rng.normal();
            tgt[(i, j)] = mu + mean_shift + sd * rng.normal();
        }
    }
    Ok((
        Dataset::new(src, Some(labels.clone()), Domain::Source)?,
        Dataset::new(tgt, Some(labels), Domain::Target)?,
    ))
}

/// Size `max(⌈percent·n⌉, minimum)` capped at `n`.
pub fn subsample_size(n: usize, percent: f64, minimum: usize) -> usize {
    // the product is rounded to 1e-9 first so that e.g. 0.1·30 counts as 3
    let scaled = ((percent * n as f64) * 1e9).round() / 1e9;
    (scaled.ceil() as usize).max(minimum).min(n)
}

fn check_subsample(data: &Dataset, percent: f64, minimum: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(percent > 0.0 && percent <= 1.0) || minimum == 0 {
        return Err(Error::Parse(format!(
            "subsampling needs 0 < percent ≤ 1 and minimum ≥ 1, got {percent} and {minimum}"
        )));
    }
    Ok(())
}

/// Splits `data` into a uniform subsample (see [`subsample_size`]) and the
/// remaining rows. Both parts keep the original row order.
pub fn split_target(data: &Dataset, percent: f64, minimum: usize, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    check_subsample(data, percent, minimum)?;
    let n = data.len();
    let k = subsample_size(n, percent, minimum);
    let mut chosen = vec![false; n];
    if k == n {
        chosen.fill(true);
    } else {
        for i in rng.permutation(n).into_iter().take(k) {
            chosen[i] = true;
        }
    }
    let (keep, rest): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| chosen[i]);
    Ok((data.select(&keep), data.select(&rest)))
}

pub fn subsample_target(data: &Dataset, percent: f64, minimum: usize, rng: &mut RngStream) -> Result<Dataset> {
    Ok(split_target(data, percent, minimum, rng)?.0)
}
