//! Small dense linear-algebra helpers for symmetric matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are clamped to zero when taking square roots.
pub const EIGEN_CLAMP: f64 = 1e-14;

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let sqrt_vals = eig.eigenvalues.map(|v| if v < EIGEN_CLAMP { 0.0 } else { v.sqrt() });
    let u = &eig.eigenvectors;
    symmetrize(&(u * DMatrix::from_diagonal(&sqrt_vals) * u.transpose()))
}

/// Checks symmetry and positive definiteness of a covariance matrix.
pub fn validate_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Input(format!("{what}: covariance is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what}: covariance has non-finite entries")));
    }
    let asym = max_asymmetry(m);
    if asym > 1e-12 {
        return Err(Error::Input(format!(
            "{what}: covariance asymmetric by {asym:e}"
        )));
    }
    let lmin = min_eigenvalue(m);
    if lmin <= 1e-12 {
        return Err(Error::Input(format!(
            "{what}: covariance not positive definite (min eigenvalue {lmin:e})"
        )));
    }
    Ok(())
}

/// Inverse and log-determinant of an SPD matrix through its Cholesky factor.
pub fn spd_inverse_logdet(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Input("Cholesky factorization failed".into()))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((symmetrize(&chol.inverse()), logdet))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable `log(sum(exp(xs)))`; returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Logistic function `1 / (1 + exp(-z))`, stable for large `|z|`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
