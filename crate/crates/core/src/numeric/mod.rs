//! Dense linear algebra, counter-based randomness and finite differences.
//!
//! Everything here is value-in/value-out; [`RngStream`] is the only stateful
//! type and is meant to have a single owner (split it instead of sharing).

mod diff;
mod linalg;
mod mat;
mod rng;

pub use diff::{finite_diff_grad, rel_err};
pub use linalg::{gauss_hermite, spd_factor, spd_solve, sym_eigen, SpdFactor, SymEigen};
pub use mat::{dot, mean_var, norm, sq_dist, tree_sum, Mat};
pub use rng::RngStream;
