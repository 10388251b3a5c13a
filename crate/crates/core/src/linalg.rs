//! Small dense linear-algebra helpers used by the covariance representations.
//!
//! Everything here operates on matrices that are small by construction
//! (inner Woodbury systems are k x k with k bounded by the rank cap, dense
//! covariances are capped at desk scale), so plain `nalgebra` routines are
//! sufficient.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{FhError, Result};

/// Eigendecomposition of a real symmetric matrix. The input is symmetrized
/// first so callers may pass products that are symmetric only up to rounding.
pub(crate) fn sym_eigen(mat: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(mat);
    let eig = sym.symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

pub(crate) fn symmetrize(mat: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (mat + mat.transpose())
}

/// Smallest eigenvalue of a real symmetric matrix.
pub(crate) fn min_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(mat);
    vals.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Solve `a * x = b` for complex square `a` via LU with partial pivoting.
pub(crate) fn solve_complex(
    a: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
) -> Result<DMatrix<Complex64>> {
    let lu = a.clone().lu();
    lu.solve(b)
        .ok_or_else(|| FhError::NumericalRank("singular inner complex system".into()))
}

/// Principal matrix square root of a small complex matrix, computed from the
/// complex Schur form with the triangular square-root recurrence. For a
/// complex symmetric input the result is symmetric, so `S * S^T = S * S = A`.
pub(crate) fn sqrtm_principal(a: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let k = a.nrows();
    if k != a.ncols() {
        return Err(FhError::contract("sqrtm requires a square matrix"));
    }
    if k == 0 {
        return Ok(a.clone());
    }
    if k == 1 {
        return Ok(DMatrix::from_element(1, 1, a[(0, 0)].sqrt()));
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| FhError::NumericalRank("complex Schur iteration failed".into()))?;
    let (q, t) = schur.unpack();
    let r = sqrt_upper_triangular(&t)?;
    Ok(&q * r * q.adjoint())
}

/// Square root of an upper-triangular matrix, principal branch on the
/// diagonal, filled in superdiagonal by superdiagonal.
fn sqrt_upper_triangular(t: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let n = t.nrows();
    let mut r = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = t[(i, i)].sqrt();
    }
    let scale = t.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
    for d in 1..n {
        for i in 0..n - d {
            let j = i + d;
            let mut s = t[(i, j)];
            for l in i + 1..j {
                s -= r[(i, l)] * r[(l, j)];
            }
            let denom = r[(i, i)] + r[(j, j)];
            if denom.norm() <= f64::EPSILON * scale.sqrt() {
                return Err(FhError::NumericalRank(
                    "matrix square root undefined (defective zero eigenvalue pair)".into(),
                ));
            }
            r[(i, j)] = s / denom;
        }
    }
    Ok(r)
}

/// log N(x | mu, cov) through a Cholesky factor of `cov`.
pub(crate) fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let n = x.len();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| FhError::domain("covariance not positive definite"))?;
    let diff = x - mean;
    let solved = chol.solve(&diff);
    let quad = diff.dot(&solved);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
}

/// Numerically stable log(sum(exp(values))).
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}
