//! Continuous-time algebraic Riccati equations with cross terms.
//!
//! Primal form, `(X, K) = ARE_p(A, B, F, H)`:
//!
//! ```text
//! A'X + XA - (XB + F'H) Psi^{-1} (XB + F'H)' + F'F = 0,   Psi = H'H
//! K = -Psi^{-1} (XB + F'H)'
//! ```
//!
//! Dual form, `(Y, L) = ARE_d(A, C, W, V)`:
//!
//! ```text
//! AY + YA' - (CY + VW')' Phi^{-1} (CY + VW') + WW' = 0,   Phi = VV'
//! L = -(CY + VW')' Phi^{-1}
//! ```
//!
//! Both are reduced to `Abar'X + X Abar - X G X + Qbar = 0` and solved from the
//! stable invariant subspace of the Hamiltonian `[[Abar, -G], [-Qbar, -Abar']]`.

use num_complex::Complex64;

use super::{
    check_cols, check_rows, check_square, eigenvalues, fro, min_sym_eig, ordered_schur,
    solve_lyapunov, spd_inverse, spectral_abscissa, symmetrize, LinalgError, Matrix,
};

/// Relative residual tolerance for Riccati solutions.
pub const DEFAULT_ARE_TOL: f64 = 1e-8;

/// Upper bound on Newton correction steps after the Schur solve.
const NEWTON_STEPS: usize = 4;

/// Relative imaginary-axis guard on Hamiltonian eigenvalues.
const IMAG_AXIS_GUARD: f64 = 1e-8;

fn weight_floor(w: &Matrix) -> f64 {
    1e-12 * (1.0 + fro(w))
}

/// Residual `A'X + XA - (XB + F'H) Psi^{-1} (XB + F'H)' + F'F`.
pub fn are_p_residual(a: &Matrix, b: &Matrix, f: &Matrix, h: &Matrix, x: &Matrix) -> Matrix {
    let psi_inv = spd_inverse(&(h.transpose() * h));
    let s = x * b + f.transpose() * h;
    a.transpose() * x + x * a - &s * psi_inv * s.transpose() + f.transpose() * f
}

/// Residual `AY + YA' - (CY + VW')' Phi^{-1} (CY + VW') + WW'`.
pub fn are_d_residual(a: &Matrix, c: &Matrix, w: &Matrix, v: &Matrix, y: &Matrix) -> Matrix {
    let phi_inv = spd_inverse(&(v * v.transpose()));
    let s = c * y + v * w.transpose();
    a * y + y * a.transpose() - s.transpose() * phi_inv * &s + w * w.transpose()
}

/// Solves the primal Riccati equation and returns the stabilizing pair `(X, K)`.
pub fn solve_are_p(
    a: &Matrix,
    b: &Matrix,
    f: &Matrix,
    h: &Matrix,
    tol: f64,
) -> Result<(Matrix, Matrix), LinalgError> {
    let n = a.nrows();
    check_square(a, "A")?;
    check_rows(b, n, "B")?;
    check_cols(f, n, "F")?;
    check_rows(h, f.nrows(), "H")?;
    check_cols(h, b.ncols(), "H")?;

    let Reduced {
        weight_inv: psi_inv,
        abar,
        g,
        q: qbar,
    } = reduce_p(a, b, f, h)?;

    let gain = |x: &Matrix| -(&psi_inv * (x * b + f.transpose() * h).transpose());
    let residual = |x: &Matrix| are_p_residual(a, b, f, h, x);
    let x = solve_reduced(&abar, &g, &qbar, residual, tol)?;
    let k = gain(&x);
    let abscissa = spectral_abscissa(&(a + b * &k));
    if !(abscissa < 0.0) {
        return Err(LinalgError::NoStableSubspace(format!(
            "A+BK is not Hurwitz (spectral abscissa {abscissa:e})"
        )));
    }
    Ok((x, k))
}

/// Solves the dual (filtering) Riccati equation and returns the stabilizing pair `(Y, L)`.
pub fn solve_are_d(
    a: &Matrix,
    c: &Matrix,
    w: &Matrix,
    v: &Matrix,
    tol: f64,
) -> Result<(Matrix, Matrix), LinalgError> {
    let n = a.nrows();
    check_square(a, "A")?;
    check_cols(c, n, "C")?;
    check_rows(w, n, "W")?;
    check_rows(v, c.nrows(), "V")?;
    check_cols(v, w.ncols(), "V")?;

    // Y solves Ahat Y + Y Ahat' - Y C' Phi^{-1} C Y + Qhat = 0.
    let Reduced {
        weight_inv: phi_inv,
        abar: ahat_t,
        g,
        q: qhat,
    } = reduce_d(a, c, w, v)?;

    let gain = |y: &Matrix| -((c * y + v * w.transpose()).transpose() * &phi_inv);
    let residual = |y: &Matrix| are_d_residual(a, c, w, v, y);
    let y = solve_reduced(&ahat_t, &g, &qhat, residual, tol)?;
    let l = gain(&y);
    let abscissa = spectral_abscissa(&(a + &l * c));
    if !(abscissa < 0.0) {
        return Err(LinalgError::NoStableSubspace(format!(
            "A+LC is not Hurwitz (spectral abscissa {abscissa:e})"
        )));
    }
    Ok((y, l))
}

struct Reduced {
    weight_inv: Matrix,
    abar: Matrix,
    g: Matrix,
    q: Matrix,
}

fn reduce_p(a: &Matrix, b: &Matrix, f: &Matrix, h: &Matrix) -> Result<Reduced, LinalgError> {
    let psi = h.transpose() * h;
    let min_eig = min_sym_eig(&psi);
    if psi.nrows() == 0 || min_eig <= weight_floor(&psi) {
        return Err(LinalgError::SingularPsi { min_eig });
    }
    let psi_inv = spd_inverse(&psi);
    let abar = a - b * &psi_inv * h.transpose() * f;
    let g = symmetrize(&(b * &psi_inv * b.transpose()));
    let q = symmetrize(&(f.transpose() * f - f.transpose() * h * &psi_inv * h.transpose() * f));
    Ok(Reduced {
        weight_inv: psi_inv,
        abar,
        g,
        q,
    })
}

fn reduce_d(a: &Matrix, c: &Matrix, w: &Matrix, v: &Matrix) -> Result<Reduced, LinalgError> {
    let phi = v * v.transpose();
    let min_eig = min_sym_eig(&phi);
    if phi.nrows() == 0 || min_eig <= weight_floor(&phi) {
        return Err(LinalgError::SingularPhi { min_eig });
    }
    let phi_inv = spd_inverse(&phi);
    let ahat = a - w * v.transpose() * &phi_inv * c;
    let g = symmetrize(&(c.transpose() * &phi_inv * c));
    let q = symmetrize(&(w * w.transpose() - w * v.transpose() * &phi_inv * v * w.transpose()));
    Ok(Reduced {
        weight_inv: phi_inv,
        abar: ahat.transpose(),
        g,
        q,
    })
}

fn hamiltonian(abar: &Matrix, g: &Matrix, q: &Matrix) -> Matrix {
    let n = abar.nrows();
    let mut ham = Matrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(abar);
    ham.view_mut((0, n), (n, n)).copy_from(&(-g));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-abar.transpose()));
    ham
}

fn axis_threshold(ham: &Matrix) -> f64 {
    IMAG_AXIS_GUARD * fro(ham).max(f64::MIN_POSITIVE)
}

/// Hamiltonian matrix associated with `ARE_p(A, B, F, H)`.
pub fn primal_hamiltonian(
    a: &Matrix,
    b: &Matrix,
    f: &Matrix,
    h: &Matrix,
) -> Result<Matrix, LinalgError> {
    let r = reduce_p(a, b, f, h)?;
    Ok(hamiltonian(&r.abar, &r.g, &r.q))
}

/// Hamiltonian matrix associated with `ARE_d(A, C, W, V)`.
pub fn dual_hamiltonian(
    a: &Matrix,
    c: &Matrix,
    w: &Matrix,
    v: &Matrix,
) -> Result<Matrix, LinalgError> {
    let r = reduce_d(a, c, w, v)?;
    Ok(hamiltonian(&r.abar, &r.g, &r.q))
}

/// Smallest `|Re lambda|` over the Hamiltonian spectrum and the guard
/// threshold it is compared against.
pub fn imaginary_axis_margin(ham: &Matrix) -> (f64, f64) {
    let distance = eigenvalues(ham)
        .iter()
        .map(|l| l.re.abs())
        .fold(f64::INFINITY, f64::min);
    (distance, axis_threshold(ham))
}

/// Stabilizing solution of `abar'X + X abar - X g X + q = 0`.
///
/// `residual` evaluates the caller's original (unreduced) equation and is used
/// for the acceptance test and to decide whether a Newton correction helped.
fn solve_reduced(
    abar: &Matrix,
    g: &Matrix,
    q: &Matrix,
    residual: impl Fn(&Matrix) -> Matrix,
    tol: f64,
) -> Result<Matrix, LinalgError> {
    let n = abar.nrows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let ham = hamiltonian(abar, g, q);
    let threshold = axis_threshold(&ham);
    let (qs, ts, stable) = ordered_schur(&ham, |l: Complex64| l.re < 0.0)?;
    let distance = (0..2 * n)
        .map(|i| ts[(i, i)].re.abs())
        .fold(f64::INFINITY, f64::min);
    if distance < threshold {
        return Err(LinalgError::ImaginaryAxisEigs {
            distance,
            threshold,
        });
    }
    if stable != n {
        return Err(LinalgError::NoStableSubspace(format!(
            "stable subspace has dimension {stable}, expected {n}"
        )));
    }

    let u1 = qs.view((0, 0), (n, n)).into_owned();
    let u2 = qs.view((n, 0), (n, n)).into_owned();
    let smin = u1
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, &s| acc.min(s));
    if smin < 1e-10 {
        return Err(LinalgError::NoStableSubspace(format!(
            "stable subspace is not a graph (sigma_min(U1) = {smin:e})"
        )));
    }
    // X U1 = U2  <=>  U1' X' = U2'
    let xt = u1
        .transpose()
        .lu()
        .solve(&u2.transpose())
        .ok_or_else(|| LinalgError::NoStableSubspace("U1 is singular".into()))?;
    let mut x = symmetrize(&xt.transpose().map(|z| z.re));

    let bound = |x: &Matrix| tol * (1.0 + fro(x));
    let mut res = fro(&residual(&x));
    // Newton defect correction on the original residual.
    for _ in 0..NEWTON_STEPS {
        let closed = abar - g * &x;
        if !(spectral_abscissa(&closed) < 0.0) {
            break;
        }
        let Ok(delta) = solve_lyapunov(&closed, &symmetrize(&residual(&x))) else {
            break;
        };
        let xn = symmetrize(&(&x + delta));
        let rn = fro(&residual(&xn));
        if !(rn < 0.5 * res) {
            break;
        }
        x = xn;
        res = rn;
    }
    if res > bound(&x) {
        return Err(LinalgError::Inaccurate {
            residual: res,
            bound: bound(&x),
        });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    const SQRT2_M1: f64 = std::f64::consts::SQRT_2 - 1.0;

    #[test]
    fn scalar_primal_closed_form() {
        // -2X - X^2 + 1 = 0, stable root sqrt(2) - 1.
        let (x, k) = solve_are_p(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &dmatrix![1.0; 0.0],
            &dmatrix![0.0; 1.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap();
        assert!((x[(0, 0)] - SQRT2_M1).abs() < 1e-13);
        assert!((k[(0, 0)] + SQRT2_M1).abs() < 1e-13);
    }

    #[test]
    fn zero_state_cost_gives_zero() {
        let (x, k) = solve_are_p(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &dmatrix![0.0; 0.0],
            &dmatrix![0.0; 1.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap();
        assert!(x[(0, 0)].abs() < 1e-14);
        assert!(k[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn scalar_dual_closed_form() {
        // Independent process and measurement noise: transpose of the primal case.
        let (y, l) = solve_are_d(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &dmatrix![1.0, 0.0],
            &dmatrix![0.0, 1.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap();
        assert!((y[(0, 0)] - SQRT2_M1).abs() < 1e-13);
        assert!((l[(0, 0)] + SQRT2_M1).abs() < 1e-13);

        // A shared noise channel (W = V = 1) is fully correlated: -Y^2 - 4Y = 0,
        // stabilizing root Y = 0 with L = -1.
        let (y, l) = solve_are_d(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &dmatrix![1.0],
            &dmatrix![1.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap();
        assert!(y[(0, 0)].abs() < 1e-13);
        assert!((l[(0, 0)] + 1.0).abs() < 1e-13);

        let (y, l) = solve_are_d(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &dmatrix![0.0],
            &dmatrix![1.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap();
        assert!(y[(0, 0)].abs() < 1e-14 && l[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn cross_term_with_full_matrices() {
        let a = dmatrix![0.5, 1.0, 0.0; -0.3, 0.2, 0.7; 0.1, -1.0, -0.4];
        let b = dmatrix![1.0, 0.0; 0.2, 1.0; -0.5, 0.3];
        let f = dmatrix![1.0, 0.0, 0.5; 0.0, 0.3, 1.0; 0.2, 0.1, 0.0; 0.0, 0.0, 0.0];
        let h = dmatrix![0.1, 0.0; 0.0, 0.2; 1.0, 0.3; 0.0, 1.0];
        let (x, k) = solve_are_p(&a, &b, &f, &h, DEFAULT_ARE_TOL).unwrap();
        let res = are_p_residual(&a, &b, &f, &h, &x);
        assert!(res.norm() < 1e-10 * (1.0 + x.norm()));
        assert!(spectral_abscissa(&(&a + &b * &k)) < 0.0);
        assert!(min_sym_eig(&x) > -1e-10);
    }

    #[test]
    fn singular_weights_are_rejected() {
        let err = solve_are_p(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &dmatrix![1.0; 0.0],
            &dmatrix![0.0; 0.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap_err();
        assert!(matches!(err, LinalgError::SingularPsi { .. }));
        let err = solve_are_d(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &dmatrix![1.0],
            &dmatrix![0.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap_err();
        assert!(matches!(err, LinalgError::SingularPhi { .. }));
    }

    #[test]
    fn imaginary_axis_detected() {
        // [A - jw, B; F, H] drops rank at w = 0.
        let err = solve_are_p(
            &dmatrix![0.0],
            &dmatrix![1.0],
            &dmatrix![0.0; 0.0],
            &dmatrix![0.0; 1.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap_err();
        assert!(
            matches!(err, LinalgError::ImaginaryAxisEigs { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn unstabilizable_has_no_stable_subspace() {
        // Unstable mode at +1 that B cannot reach: the Hamiltonian stays
        // hyperbolic but the solution is not stabilizing.
        let err = solve_are_p(
            &dmatrix![1.0],
            &dmatrix![0.0],
            &dmatrix![1.0; 0.0],
            &dmatrix![0.0; 1.0],
            DEFAULT_ARE_TOL,
        )
        .unwrap_err();
        assert!(matches!(err, LinalgError::NoStableSubspace(_)), "{err:?}");
    }
}
