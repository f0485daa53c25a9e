//! Thin wrappers over the LAPACK-backed decompositions used in this crate.
//!
//! Everything numerical that is *not* a standard dense decomposition lives in
//! the domain modules; this module only adapts [`ndarray_linalg`] calls to the
//! crate error type and pins down orientation conventions (which triangle is
//! read, eigenvalue ordering, and so on).

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, QR, SVD, UPLO};

use crate::error::{Error, Result};

/// Economy-size QR factorization of a square or tall matrix.
///
/// Returns `(q, r)` with `q` of shape `(m, n)` having orthonormal columns and
/// `r` upper triangular `(n, n)`. Callers that need a wide factorization
/// transpose first (see `sampler::haar_orthogonal`).
pub fn qr_thin(a: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (m, n) = a.dim();
    if m < n {
        return Err(Error::shape(format!(
            "qr_thin expects rows >= cols, got {m}x{n}"
        )));
    }
    a.qr().map_err(|e| Error::Linalg(e.to_string()))
}

/// Eigendecomposition of a symmetric matrix.
///
/// Only the lower triangle is read. Eigenvalues come back in ascending order
/// with eigenvectors in the matching columns.
pub fn sym_eig(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "sym_eig expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    a.eigh(UPLO::Lower).map_err(|e| Error::Linalg(e.to_string()))
}

/// Eigenvalues of a symmetric matrix, ascending. Lower triangle is read.
pub fn sym_eigvals(a: &Array2<f64>) -> Result<Array1<f64>> {
    sym_eig(a).map(|(vals, _)| vals)
}

/// Singular values in descending order.
pub fn singular_values(a: &Array2<f64>) -> Result<Array1<f64>> {
    let (_, s, _) = a
        .svd(false, false)
        .map_err(|e| Error::Linalg(e.to_string()))?;
    Ok(s)
}

/// Frobenius norm.
pub fn fro_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
