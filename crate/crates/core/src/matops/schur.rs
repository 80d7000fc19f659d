use nalgebra::Schur;
use num_complex::Complex64;

use super::{to_complex, ComplexMatrix, LinalgError, Matrix};

const SCHUR_MAX_ITER: usize = 20_000;

/// Deflation tolerances tried in turn; the QR iteration occasionally stalls
/// at machine precision on matrices with many repeated eigenvalues.
const SCHUR_TOLERANCES: [f64; 4] = [f64::EPSILON, 8.0 * f64::EPSILON, 64.0 * f64::EPSILON, 1e-13];

/// Complex Schur form `a = q t q^H` with `t` upper triangular.
pub fn complex_schur(a: &Matrix) -> Result<(ComplexMatrix, ComplexMatrix), LinalgError> {
    let n = a.nrows();
    let ca = to_complex(a);
    for tol in SCHUR_TOLERANCES {
        if let Some(schur) = Schur::try_new(ca.clone(), tol, SCHUR_MAX_ITER) {
            let (q, mut t) = schur.unpack();
            for j in 0..n {
                for i in (j + 1)..n {
                    t[(i, j)] = Complex64::new(0.0, 0.0);
                }
            }
            return Ok((q, t));
        }
    }
    // A fixed orthogonal change of basis perturbs the iteration path.
    let h = reflector(n);
    let rotated = &h * a * &h;
    for tol in SCHUR_TOLERANCES {
        if let Some(schur) = Schur::try_new(to_complex(&rotated), tol, SCHUR_MAX_ITER) {
            let (q, mut t) = schur.unpack();
            for j in 0..n {
                for i in (j + 1)..n {
                    t[(i, j)] = Complex64::new(0.0, 0.0);
                }
            }
            return Ok((to_complex(&h) * q, t));
        }
    }
    Err(LinalgError::NoConvergence)
}

/// Householder reflector `I - 2 v v' / v'v` with an irregular `v`.
fn reflector(n: usize) -> Matrix {
    let v = nalgebra::DVector::from_fn(n, |i, _| {
        1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract()
    });
    Matrix::identity(n, n) - &v * v.transpose() * (2.0 / v.norm_squared())
}

/// Eigenvalues of a real square matrix.
///
/// Falls back to NaN entries if the Schur iteration does not converge.
pub fn eigenvalues(a: &Matrix) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    match complex_schur(a) {
        Ok((_, t)) => t.diagonal().iter().copied().collect(),
        Err(_) => vec![Complex64::new(f64::NAN, f64::NAN); a.nrows()],
    }
}

/// Largest real part over the spectrum of `a` (`-inf` for an empty matrix).
///
/// NaN when the eigenvalues cannot be computed.
pub fn spectral_abscissa(a: &Matrix) -> f64 {
    eigenvalues(a).iter().fold(f64::NEG_INFINITY, |acc, l| {
        if acc.is_nan() || l.re.is_nan() {
            f64::NAN
        } else {
            acc.max(l.re)
        }
    })
}

/// Complex Schur form `a = q t q^H` with the eigenvalues selected by `select`
/// moved to the leading diagonal positions. Returns `(q, t, k)` where `k` is
/// the number of selected eigenvalues.
pub fn ordered_schur(
    a: &Matrix,
    select: impl Fn(Complex64) -> bool,
) -> Result<(ComplexMatrix, ComplexMatrix, usize), LinalgError> {
    let n = a.nrows();
    let (mut q, mut t) = complex_schur(a)?;
    let mut placed = 0;
    for idx in 0..n {
        if select(t[(idx, idx)]) {
            let mut k = idx;
            while k > placed {
                swap_adjacent(&mut t, &mut q, k - 1);
                k -= 1;
            }
            placed += 1;
        }
    }
    Ok((q, t, placed))
}

/// Exchange diagonal entries `k` and `k+1` of the triangular factor with a
/// unitary rotation, updating the Schur vectors accordingly.
fn swap_adjacent(t: &mut ComplexMatrix, q: &mut ComplexMatrix, k: usize) {
    let n = t.nrows();
    let a = t[(k, k)];
    let d = t[(k + 1, k + 1)];
    let b = t[(k, k + 1)];
    let g = d - a;
    let norm = (b.norm_sqr() + g.norm_sqr()).sqrt();
    if norm == 0.0 {
        return;
    }
    // First column of the rotation is the eigenvector of [[a, b], [0, d]] for d.
    let x = b / norm;
    let y = g / norm;

    for j in 0..n {
        let r0 = t[(k, j)];
        let r1 = t[(k + 1, j)];
        t[(k, j)] = x.conj() * r0 + y.conj() * r1;
        t[(k + 1, j)] = -y * r0 + x * r1;
    }
    for m in [&mut *t, &mut *q] {
        for i in 0..n {
            let c0 = m[(i, k)];
            let c1 = m[(i, k + 1)];
            m[(i, k)] = c0 * x + c1 * y;
            m[(i, k + 1)] = -c0 * y.conj() + c1 * x.conj();
        }
    }
    t[(k + 1, k)] = Complex64::new(0.0, 0.0);
    t[(k, k)] = d;
    t[(k + 1, k + 1)] = a;
}
