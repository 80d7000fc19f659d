use num_complex::Complex64;

use super::{
    check_cols, check_rows, check_square, fro, ordered_schur, spectral_abscissa, symmetrize,
    ComplexMatrix, LinalgError, Matrix,
};

/// Relative residual tolerance for Lyapunov and Sylvester solutions.
pub const DEFAULT_LYAP_TOL: f64 = 1e-10;

/// Solves `A X + X B + C = 0` (Bartels-Stewart on complex Schur forms).
pub fn solve_sylvester(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix, LinalgError> {
    check_square(a, "A")?;
    check_square(b, "B")?;
    check_rows(c, a.nrows(), "C")?;
    check_cols(c, b.nrows(), "C")?;
    let (m, n) = (a.nrows(), b.nrows());
    if m == 0 || n == 0 {
        return Ok(Matrix::zeros(m, n));
    }

    let (u, t, _) = ordered_schur(a, |_| false)?;
    let (v, s, _) = ordered_schur(b, |_| false)?;
    let cc = c.map(|x| Complex64::new(x, 0.0));
    // T Y + Y S = -U^H C V, column by column.
    let rhs = -(u.adjoint() * cc * &v);
    let gap_floor = 1e-13 * (1.0 + fro(a) + fro(b));
    let mut y = ComplexMatrix::zeros(m, n);
    for k in 0..n {
        let mut col = rhs.column(k).into_owned();
        for l in 0..k {
            let skl = s[(l, k)];
            if skl != Complex64::new(0.0, 0.0) {
                col -= y.column(l) * skl;
            }
        }
        let shift = s[(k, k)];
        // Back substitution with the upper triangular T + s_kk I.
        for i in (0..m).rev() {
            let mut acc = col[i];
            for j in (i + 1)..m {
                acc -= t[(i, j)] * y[(j, k)];
            }
            let diag = t[(i, i)] + shift;
            if diag.norm() < gap_floor {
                return Err(LinalgError::SpectraOverlap { gap: diag.norm() });
            }
            y[(i, k)] = acc / diag;
        }
    }
    let x = (u * y * v.adjoint()).map(|z| z.re);
    Ok(x)
}

/// Solves `A' X + X A + Q = 0` for Hurwitz `A`.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, LinalgError> {
    check_square(a, "A")?;
    check_square(q, "Q")?;
    check_rows(q, a.nrows(), "Q")?;
    if a.nrows() == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let abscissa = spectral_abscissa(a);
    if !(abscissa < 0.0) {
        return Err(LinalgError::UnstableA { abscissa });
    }
    let x = solve_sylvester(&a.transpose(), a, q)?;
    Ok(symmetrize(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn lyapunov_examples() {
        let x = solve_lyapunov(&dmatrix![-1.0], &dmatrix![2.0]).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        let x = solve_lyapunov(&dmatrix![-1.0, 0.0; 0.0, -2.0], &Matrix::identity(2, 2)).unwrap();
        assert!((x - dmatrix![0.5, 0.0; 0.0, 0.25]).norm() < 1e-15);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let err = solve_lyapunov(&dmatrix![0.5], &dmatrix![1.0]).unwrap_err();
        assert!(matches!(err, LinalgError::UnstableA { .. }));
    }

    #[test]
    fn sylvester_examples() {
        let x = solve_sylvester(&dmatrix![-1.0], &dmatrix![-1.0], &dmatrix![2.0]).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        let x = solve_sylvester(&dmatrix![0.0], &dmatrix![-2.0], &dmatrix![4.0]).unwrap();
        assert!((x[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sylvester_overlap() {
        let err = solve_sylvester(&dmatrix![1.0], &dmatrix![-1.0], &dmatrix![1.0]).unwrap_err();
        assert!(matches!(err, LinalgError::SpectraOverlap { .. }));
    }

    #[test]
    fn complex_spectra() {
        let a = dmatrix![0.0, 2.0, 0.0; -2.0, -0.5, 1.0; 0.0, 0.3, -1.0];
        let b = dmatrix![-3.0, 1.0; -1.0, -3.0];
        let c = dmatrix![1.0, 2.0; 0.0, -1.0; 0.5, 0.5];
        let x = solve_sylvester(&a, &b, &c).unwrap();
        assert!((&a * &x + &x * &b + &c).norm() < 1e-12);
    }
}
