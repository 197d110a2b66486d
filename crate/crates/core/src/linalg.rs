//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest admissible diagonal entry of a Cholesky factor.
pub const SPD_DIAG_TOL: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Cholesky factorization that rejects matrices whose factor has a diagonal
/// entry at or below [`SPD_DIAG_TOL`].
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what}: not square")));
    }
    let chol = Cholesky::new(symmetrized(m.clone()))
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    if chol.l_dirty().diagonal().iter().any(|d| !(*d > SPD_DIAG_TOL)) {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    Ok(chol)
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.iter().all(|v| v.is_finite()) && cholesky(m, "").is_ok()
}

pub fn chol_ln_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse and log-determinant of an SPD matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let chol = cholesky(m, what)?;
    let ln_det = chol_ln_det(&chol);
    Ok((symmetrized(chol.inverse()), ln_det))
}

/// `v' M v` for a square `M`.
pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// `tr(A B)` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn diag_matrix(n: usize, value: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal_element(n, n, value)
}
