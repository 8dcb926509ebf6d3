//! Fixtures shared by the criterion benches.

use steinda_core::score::{GmmModel, GaussianModel};
use steinda_core::{Mat, RngStream};

/// `n` standard-normal rows in `d` dimensions.
pub fn sample(n: usize, d: usize, seed: u64) -> Mat {
    RngStream::new(seed).normal_mat(n, d)
}

pub fn standard_gaussian(d: usize) -> GaussianModel {
    GaussianModel::standard(d)
}

/// Equal-weight mixture with unit variances and standard-normal means.
pub fn mixture(k: usize, d: usize, seed: u64) -> GmmModel {
    let means = RngStream::new(seed).normal_mat(k, d);
    let variances = Mat::from_fn(k, d, |_, _| 1.0);
    GmmModel::new(vec![1.0 / k as f64; k], means, variances).expect("valid mixture")
}
