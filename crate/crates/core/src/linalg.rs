//! Shared dense linear-algebra helpers used across the crate.
//!
//! All covariance-like matrices are kept symmetric by explicit
//! re-symmetrization, and every "inverse times" operation goes through a
//! Cholesky factorization of a symmetric positive-definite matrix instead
//! of forming an inverse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry (0 for empty matrices).
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
}

/// Largest absolute entry of a vector (0 for empty).
pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

/// Largest absolute deviation from symmetry, `max |m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of the symmetrized matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Whether `m` is symmetric (within `tol` scaled by the entry magnitude)
/// with all eigenvalues at least `-tol * (1 + spectral magnitude)`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    if asymmetry(m) > tol * (1.0 + max_abs(m)) {
        return false;
    }
    let ev = symmetric_eigenvalues(m);
    let scale = ev.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    ev[0] >= -tol * (1.0 + scale)
}

/// Whether `m` is symmetric positive definite with a strictness margin:
/// the smallest eigenvalue must exceed `margin * (1 + spectral magnitude)`.
pub fn is_strictly_pd(m: &DMatrix<f64>, margin: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    if asymmetry(m) > 1e-10 * (1.0 + max_abs(m)) {
        return false;
    }
    min_eigenvalue(m) > margin * (1.0 + spectral_magnitude(m))
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(m);
    ev.first().copied().unwrap_or(0.0)
}

/// Largest eigenvalue magnitude of the symmetrized matrix.
pub fn spectral_magnitude(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m)
        .iter()
        .fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// 2-norm condition number of a symmetric PSD matrix; `f64::INFINITY`
/// when the smallest eigenvalue is not positive.
pub fn symmetric_condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Cholesky factorization of a symmetric PD matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// Solves `s * x = rhs` for symmetric PD `s`.
pub fn spd_solve(s: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(s).map(|ch| ch.solve(rhs))
}

/// Computes `b * s^{-1}` for symmetric PD `s` via `s x^T = b^T`.
pub fn right_divide_spd(b: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    spd_solve(s, &b.transpose()).map(|x| x.transpose())
}

/// Spectral radius of a general square matrix, via Gelfand's formula with
/// normalized repeated squaring: `rho(M) = lim ||M^(2^j)||^(1/2^j)`.
///
/// Each squaring doubles the implicit power, so 60 rounds evaluate the
/// norm of an astronomically high power with the matrix renormalized at
/// every step; subdominant eigenvalues and Jordan-block polynomial factors
/// are driven below double precision. Always terminates, unlike iterative
/// Schur decompositions, which fail to converge on some defective
/// matrices (e.g. permutation-like nilpotent shifts).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut current = m.clone();
    let mut log_rho = 0.0f64;
    let mut weight = 1.0f64;
    for _ in 0..60 {
        let norm = current.norm();
        if norm == 0.0 {
            return 0.0;
        }
        if !norm.is_finite() {
            return f64::INFINITY;
        }
        log_rho += weight * norm.ln();
        weight *= 0.5;
        current = (&current / norm) * (&current / norm);
    }
    log_rho.exp()
}
