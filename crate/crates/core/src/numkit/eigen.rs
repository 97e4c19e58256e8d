use crate::error::{Error, Result};

use super::Matrix;

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Asymmetry tolerated (relative to the Frobenius norm) before an input is
/// refused rather than symmetrized.
const SYMMETRY_TOL: f64 = 1e-9;
/// Negative eigenvalues of PSD inputs within this fraction of `‖M‖_F` are
/// round-off and are clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-9;

/// Eigenpairs of a symmetric matrix: `m = Q diag(values) Qᵀ` with eigenvalues
/// in descending order and eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// `Q diag(values) Qᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let q = &self.vectors;
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| q.get(i, k) * self.values[k] * q.get(j, k))
                .sum()
        })
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized by averaging with its transpose; asymmetry beyond
/// `1e-9 ‖m‖_F` is an error. Sweeps stop once the off-diagonal Frobenius mass
/// drops below `1e-12 ‖m‖_F`.
pub fn sym_eigendecompose(m: &Matrix) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.all_finite() {
        return Err(Error::Numeric("non-finite entry in eigensolver input".into()));
    }
    let n = m.rows();
    let norm = m.frobenius_norm();
    if m.max_asymmetry() > SYMMETRY_TOL * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric(format!(
            "matrix is not symmetric (max asymmetry {:e})",
            m.max_asymmetry()
        )));
    }

    let mut a = m.symmetrized().into_vec();
    let mut v = Matrix::identity(n).into_vec();
    let tol = OFF_DIAGONAL_TOL * norm;

    let mut converged = n <= 1 || norm == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let g = a[k * n + p];
                    let h = a[k * n + q];
                    a[k * n + p] = c * g - s * h;
                    a[k * n + q] = s * g + c * h;
                }
                for k in 0..n {
                    let g = a[p * n + k];
                    let h = a[q * n + k];
                    a[p * n + k] = c * g - s * h;
                    a[q * n + k] = s * g + c * h;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let g = v[k * n + p];
                    let h = v[k * n + q];
                    v[k * n + p] = c * g - s * h;
                    v[k * n + q] = s * g + c * h;
                }
            }
        }
        converged = off_diagonal_norm(&a, n) <= tol;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r * n + order[c]]);
    Ok(SymEigen { values, vectors })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += 2.0 * a[i * n + j] * a[i * n + j];
        }
    }
    s.sqrt()
}

/// Smallest eigenvalue of a symmetric PSD matrix.
///
/// Round-off negatives down to `-1e-9 ‖m‖_F` are clamped to zero; anything
/// more negative means the input was not PSD and is reported as an error.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    let eig = sym_eigendecompose(m)?;
    clamp_psd(eig.min(), m.frobenius_norm())
}

pub(crate) fn clamp_psd(value: f64, norm: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -PSD_CLAMP_TOL * norm {
        Ok(0.0)
    } else {
        Err(Error::Numeric(format!(
            "matrix is not positive semi-definite (eigenvalue {value:e})"
        )))
    }
}
