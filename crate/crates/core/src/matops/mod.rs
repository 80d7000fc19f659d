//! Dense real linear algebra used throughout the synthesis pipeline.
//!
//! Everything here works on small, dense `f64` matrices. The Riccati and
//! Sylvester solvers are built on a complex Schur form with explicit
//! eigenvalue reordering, so no LAPACK binding is required.

mod operator;
mod riccati;
mod schur;
mod sylvester;
mod system;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

pub use operator::assemble_linear_operator;
pub use riccati::{
    are_d_residual, are_p_residual, dual_hamiltonian, imaginary_axis_margin, primal_hamiltonian,
    solve_are_d, solve_are_p, DEFAULT_ARE_TOL,
};
pub use schur::{eigenvalues, ordered_schur, spectral_abscissa};
pub use sylvester::{solve_lyapunov, solve_sylvester, DEFAULT_LYAP_TOL};
pub(crate) use system::block_diag;
pub use system::{
    cmax_abs, complex_spectral_norm, freq_response, frequency_grid, h2_norm, h2_norm_observability,
    sampled_peak_gain, StateSpace,
};

/// Real dense matrix.
pub type Matrix = DMatrix<f64>;
/// Complex dense matrix, used for frequency responses.
pub type ComplexMatrix = DMatrix<Complex64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("H^T H is numerically singular (smallest eigenvalue {min_eig:e})")]
    SingularPsi { min_eig: f64 },
    #[error("V V^T is numerically singular (smallest eigenvalue {min_eig:e})")]
    SingularPhi { min_eig: f64 },
    #[error("Hamiltonian has eigenvalues on the imaginary axis (|Re| = {distance:e}, threshold {threshold:e})")]
    ImaginaryAxisEigs { distance: f64, threshold: f64 },
    #[error("stable invariant subspace is not usable: {0}")]
    NoStableSubspace(String),
    #[error("Riccati residual {residual:e} exceeds tolerance {bound:e}")]
    Inaccurate { residual: f64, bound: f64 },
    #[error("state matrix is not Hurwitz (spectral abscissa {abscissa:e})")]
    UnstableA { abscissa: f64 },
    #[error("spectra of A and -B overlap (|lambda_i + mu_j| = {gap:e})")]
    SpectraOverlap { gap: f64 },
    #[error("j*omega is (numerically) an eigenvalue of A at omega = {omega}")]
    ResonantFrequency { omega: f64 },
    #[error("H2 norm requires a strictly proper system (max |D| = {max_abs:e})")]
    NonzeroD { max_abs: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

pub(crate) fn to_complex(m: &Matrix) -> ComplexMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Frobenius norm.
pub fn fro(m: &Matrix) -> f64 {
    m.norm()
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eig(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &x| acc.min(x))
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(m: &Matrix) -> Matrix {
    sym_power(m, |x| x.max(0.0).sqrt())
}

/// Inverse principal square root of a symmetric positive definite matrix.
pub fn sym_inv_sqrt(m: &Matrix) -> Matrix {
    sym_power(m, |x| 1.0 / x.sqrt())
}

fn sym_power(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = Matrix::from_diagonal(&eig.eigenvalues.map(f));
    let v = &eig.eigenvectors;
    symmetrize(&(v * d * v.transpose()))
}

/// Inverse of a symmetric positive definite matrix through its eigendecomposition.
pub(crate) fn spd_inverse(m: &Matrix) -> Matrix {
    sym_power(m, |x| 1.0 / x)
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank with the threshold `rel_tol * sigma_max`.
pub fn rank(m: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&x| x > rel_tol * smax).count(),
        _ => 0,
    }
}

/// Exact 1-norm condition number `||M||_1 ||M^{-1}||_1`, infinite when singular.
pub fn condition_1norm(m: &Matrix) -> f64 {
    let n1 = |x: &Matrix| {
        x.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0_f64, f64::max)
    };
    match m.clone().lu().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => n1(m) * n1(&inv),
        _ => f64::INFINITY,
    }
}

/// Kronecker product.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

pub(crate) fn check_square(m: &Matrix, name: &str) -> Result<(), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_rows(m: &Matrix, rows: usize, name: &str) -> Result<(), LinalgError> {
    if m.nrows() != rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "{name} must have {rows} rows, got {}",
            m.nrows()
        )));
    }
    Ok(())
}

pub(crate) fn check_cols(m: &Matrix, cols: usize, name: &str) -> Result<(), LinalgError> {
    if m.ncols() != cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "{name} must have {cols} columns, got {}",
            m.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn sym_sqrt_squares_back() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let r = sym_sqrt(&m);
        assert!((&r * &r - &m).norm() < 1e-12);
        let ri = sym_inv_sqrt(&m);
        assert!((&ri * &m * &ri - Matrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn rank_and_condition() {
        let m = dmatrix![1.0, 2.0; 2.0, 4.0];
        assert_eq!(rank(&m, 1e-10), 1);
        assert!(condition_1norm(&m) > 1e15);
        assert!((condition_1norm(&Matrix::identity(3, 3)) - 1.0).abs() < 1e-15);
    }
}
