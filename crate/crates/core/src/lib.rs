// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod discrepancy;
pub mod error;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod nnet;
pub mod numeric;
pub mod score;
pub mod uda;

pub use error::{Error, Result};
pub use numeric::{Mat, RngStream};
