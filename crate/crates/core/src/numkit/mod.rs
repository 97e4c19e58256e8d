//! Numerical substrate shared by the rest of the crate.

mod binom;
mod eigen;
mod matrix;
mod rng;

pub use binom::{log_binom_cdf, log_binom_pmf, log_binom_sf, log_sum_exp};
pub(crate) use eigen::clamp_psd;
pub use eigen::{min_eigenvalue, sym_eigendecompose, SymEigen, PSD_CLAMP_TOL};
pub use matrix::Matrix;
pub(crate) use rng::check_sigma;
pub use rng::{fill_gaussian, gaussian_vector, RngStream, StreamRng};

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
