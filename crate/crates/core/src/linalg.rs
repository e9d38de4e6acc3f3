//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorization; failure is the SPD-violation signal.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Chol> {
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite(format!("{what} (non-square)")));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what} (non-finite entries)")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `a * m + (1 - a) * I`, the VP interpolation of a covariance toward identity.
pub fn blend_with_identity(m: &DMatrix<f64>, a: f64) -> DMatrix<f64> {
    let mut out = m * a;
    for i in 0..out.nrows() {
        out[(i, i)] += 1.0 - a;
    }
    out
}

/// Solves `Σ Z = Bᵀ` for a row-major batch `B` (one sample per row) and
/// returns `Zᵀ`, i.e. every row mapped through `Σ⁻¹`.
pub fn solve_rows(chol: &Chol, rows: &DMatrix<f64>) -> DMatrix<f64> {
    let mut rhs = rows.transpose();
    chol.solve_mut(&mut rhs);
    rhs.transpose()
}

pub fn row(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

/// Stacks vectors as the rows of a matrix.
pub fn rows_to_matrix(rows: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j])
}

/// Sample covariance (divisor `n - 1`) of the rows of `m`.
pub fn sample_covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mean = m.row_mean();
    let mut centered = m.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    symmetrize(&mut cov);
    cov
}
