//! Small dense linear-algebra helpers shared by the filter, attack and analysis code.
//!
//! Inverses are never formed with `try_inverse`; everything goes through a
//! Cholesky or LU solve so that a failed factorization surfaces as
//! [`Error::Singular`].

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: Matrix) -> Matrix {
    symmetrize(&mut m);
    m
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn spd_solve(m: &Matrix, rhs: &Matrix, context: &'static str) -> Result<Matrix> {
    let chol = m.clone().cholesky().ok_or(Error::Singular(context))?;
    let x = chol.solve(rhs);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(context))
    }
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &Matrix, context: &'static str) -> Result<Matrix> {
    let n = m.nrows();
    spd_solve(m, &Matrix::identity(n, n), context).map(symmetrized)
}

/// Computes `x · m⁻¹` for a general square `m` (LU with partial pivoting).
pub fn right_divide(x: &Matrix, m: &Matrix, context: &'static str) -> Result<Matrix> {
    let lu = m.transpose().lu();
    let sol = lu.solve(&x.transpose()).ok_or(Error::Singular(context))?;
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol.transpose())
    } else {
        Err(Error::Singular(context))
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// nalgebra's implicit QR iteration can return non-finite eigenvalues for some
/// sparse, low-rank inputs (many zero rows). Such results are retried on
/// `m + sI`, which has the same eigenvectors, and shifted back.
pub fn sym_eigen(m: &Matrix) -> SymmetricEigen<f64, Dyn> {
    let m = symmetrized(m.clone());
    let n = m.nrows();
    let base = 1.0 + m.amax();
    let mut eig = m.clone().symmetric_eigen();
    for factor in [1.0, 3.7, 11.3] {
        if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).all(|v| v.is_finite()) {
            break;
        }
        let shift = factor * base;
        eig = (&m + Matrix::identity(n, n) * shift).symmetric_eigen();
        eig.eigenvalues.add_scalar_mut(-shift);
    }
    eig
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = sym_eigen(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `(λmin, λmax)` of a symmetric matrix.
pub fn sym_eigen_extremes(m: &Matrix) -> (f64, f64) {
    let ev = sym_eigenvalues(m);
    (ev[0], ev[ev.len() - 1])
}

/// Factor `F` with `F Fᵀ = m` for a symmetric PSD `m`, built from the
/// eigendecomposition so semidefinite (and zero) matrices are accepted.
/// Returns the factor together with the smallest eigenvalue.
pub fn psd_factor(m: &Matrix) -> (Matrix, f64) {
    let n = m.nrows();
    if n == 0 {
        return (Matrix::zeros(0, 0), 0.0);
    }
    let eig = sym_eigen(m);
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let mut factor = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    (factor, min_eig)
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &Matrix) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn block(m: &Matrix, i: usize, j: usize, size: usize) -> Matrix {
    m.view((i * size, j * size), (size, size)).into_owned()
}

pub fn set_block(m: &mut Matrix, i: usize, j: usize, value: &Matrix) {
    let (r, c) = value.shape();
    m.view_mut((i * r, j * c), (r, c)).copy_from(value);
}

pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

pub fn trace(m: &Matrix) -> f64 {
    m.trace()
}

/// Maximum absolute asymmetry `max |m_ij − m_ji|`.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}
