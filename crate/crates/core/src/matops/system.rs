use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{
    max_abs, solve_lyapunov, spectral_abscissa, to_complex, ComplexMatrix, LinalgError, Matrix,
};

/// Real state-space realization `C (sI - A)^{-1} B + D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

impl StateSpace {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, d: Matrix) -> Result<Self, LinalgError> {
        let n = a.nrows();
        let ok = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && d.nrows() == c.nrows()
            && d.ncols() == b.ncols();
        if !ok {
            return Err(LinalgError::DimensionMismatch(format!(
                "A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    /// Strictly proper realization (`D = 0`).
    pub fn strictly_proper(a: Matrix, b: Matrix, c: Matrix) -> Result<Self, LinalgError> {
        let d = Matrix::zeros(c.nrows(), b.ncols());
        Self::new(a, b, c, d)
    }

    /// Static gain with no states.
    pub fn gain(d: Matrix) -> Self {
        Self {
            a: Matrix::zeros(0, 0),
            b: Matrix::zeros(0, d.ncols()),
            c: Matrix::zeros(d.nrows(), 0),
            d,
        }
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }
    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_stable(&self) -> bool {
        self.states() == 0 || spectral_abscissa(&self.a) < 0.0
    }

    /// Cascade `self * rhs` (signal passes through `rhs` first).
    pub fn series(&self, rhs: &StateSpace) -> Result<StateSpace, LinalgError> {
        if self.inputs() != rhs.outputs() {
            return Err(LinalgError::DimensionMismatch(format!(
                "series: {} inputs vs {} outputs",
                self.inputs(),
                rhs.outputs()
            )));
        }
        let (n1, n2) = (self.states(), rhs.states());
        let mut a = Matrix::zeros(n1 + n2, n1 + n2);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((0, n1), (n1, n2)).copy_from(&(&self.b * &rhs.c));
        a.view_mut((n1, n1), (n2, n2)).copy_from(&rhs.a);
        let mut b = Matrix::zeros(n1 + n2, rhs.inputs());
        b.view_mut((0, 0), (n1, rhs.inputs()))
            .copy_from(&(&self.b * &rhs.d));
        b.view_mut((n1, 0), (n2, rhs.inputs())).copy_from(&rhs.b);
        let mut c = Matrix::zeros(self.outputs(), n1 + n2);
        c.view_mut((0, 0), (self.outputs(), n1)).copy_from(&self.c);
        c.view_mut((0, n1), (self.outputs(), n2))
            .copy_from(&(&self.d * &rhs.c));
        let d = &self.d * &rhs.d;
        StateSpace::new(a, b, c, d)
    }

    /// Parallel sum `self + rhs`.
    pub fn parallel(&self, rhs: &StateSpace) -> Result<StateSpace, LinalgError> {
        if self.inputs() != rhs.inputs() || self.outputs() != rhs.outputs() {
            return Err(LinalgError::DimensionMismatch(
                "parallel: shape mismatch".into(),
            ));
        }
        let (n1, n2) = (self.states(), rhs.states());
        let a = block_diag(&self.a, &rhs.a);
        let mut b = Matrix::zeros(n1 + n2, self.inputs());
        b.view_mut((0, 0), (n1, self.inputs())).copy_from(&self.b);
        b.view_mut((n1, 0), (n2, self.inputs())).copy_from(&rhs.b);
        let mut c = Matrix::zeros(self.outputs(), n1 + n2);
        c.view_mut((0, 0), (self.outputs(), n1)).copy_from(&self.c);
        c.view_mut((0, n1), (self.outputs(), n2)).copy_from(&rhs.c);
        StateSpace::new(a, b, c, &self.d + &rhs.d)
    }

    pub fn negate(&self) -> StateSpace {
        StateSpace {
            a: self.a.clone(),
            b: self.b.clone(),
            c: -&self.c,
            d: -&self.d,
        }
    }

    /// State coordinate change `x -> T x`, i.e. `(T A T^{-1}, T B, C T^{-1}, D)`.
    pub fn similarity(&self, t: &Matrix, t_inv: &Matrix) -> StateSpace {
        StateSpace {
            a: t * &self.a * t_inv,
            b: t * &self.b,
            c: &self.c * t_inv,
            d: self.d.clone(),
        }
    }
}

pub(crate) fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut(a.shape(), b.shape()).copy_from(b);
    m
}

/// Evaluates `C (j omega I - A)^{-1} B + D`.
pub fn freq_response(sys: &StateSpace, omega: f64) -> Result<ComplexMatrix, LinalgError> {
    let n = sys.states();
    let d = to_complex(&sys.d);
    if n == 0 {
        return Ok(d);
    }
    let s = Complex64::new(0.0, omega);
    let mut m = to_complex(&(-&sys.a));
    for i in 0..n {
        m[(i, i)] += s;
    }
    let x = m
        .lu()
        .solve(&to_complex(&sys.b))
        .ok_or(LinalgError::ResonantFrequency { omega })?;
    let g = to_complex(&sys.c) * x + d;
    if g.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(LinalgError::ResonantFrequency { omega });
    }
    Ok(g)
}

fn h2_preconditions(sys: &StateSpace) -> Result<(), LinalgError> {
    let dmax = max_abs(&sys.d);
    if dmax > 0.0 {
        return Err(LinalgError::NonzeroD { max_abs: dmax });
    }
    if sys.states() > 0 {
        let abscissa = spectral_abscissa(&sys.a);
        if !(abscissa < 0.0) {
            return Err(LinalgError::UnstableA { abscissa });
        }
    }
    Ok(())
}

/// H2 norm through the controllability Gramian `AP + PA' + BB' = 0`.
pub fn h2_norm(sys: &StateSpace) -> Result<f64, LinalgError> {
    h2_preconditions(sys)?;
    if sys.states() == 0 {
        return Ok(0.0);
    }
    let p = solve_lyapunov(&sys.a.transpose(), &(&sys.b * sys.b.transpose()))?;
    Ok((&sys.c * p * sys.c.transpose()).trace().max(0.0).sqrt())
}

/// H2 norm through the observability Gramian `A'Q + QA + C'C = 0`.
pub fn h2_norm_observability(sys: &StateSpace) -> Result<f64, LinalgError> {
    h2_preconditions(sys)?;
    if sys.states() == 0 {
        return Ok(0.0);
    }
    let q = solve_lyapunov(&sys.a, &(sys.c.transpose() * &sys.c))?;
    Ok((sys.b.transpose() * q * &sys.b).trace().max(0.0).sqrt())
}

/// `omega = 0` followed by `n` log-spaced points in `[lo, hi]`.
pub fn frequency_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut grid = vec![0.0];
    match n {
        0 => {}
        1 => grid.push(lo),
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            let step = (b - a) / (n - 1) as f64;
            grid.extend((0..n).map(|k| 10f64.powf(a + step * k as f64)));
        }
    }
    grid
}

/// Largest singular value of a complex matrix (0 for empty matrices).
pub fn complex_spectral_norm(m: &ComplexMatrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |acc, &x| acc.max(x))
}

/// Peak of `||G(j omega)||_2` over the sampled frequencies.
pub fn sampled_peak_gain(sys: &StateSpace, freqs: &[f64]) -> Result<f64, LinalgError> {
    let mut peak = 0.0_f64;
    for &w in freqs {
        peak = peak.max(complex_spectral_norm(&freq_response(sys, w)?));
    }
    Ok(peak)
}

/// Max entrywise modulus, used for frequency-sampled defect norms.
pub fn cmax_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn first_order() -> StateSpace {
        StateSpace::new(dmatrix![-1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![0.0]).unwrap()
    }

    #[test]
    fn h2_first_order() {
        let h = h2_norm(&first_order()).unwrap();
        assert!((h - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let mut zero = first_order();
        zero.c = dmatrix![0.0];
        assert_eq!(h2_norm(&zero).unwrap(), 0.0);
    }

    #[test]
    fn h2_errors() {
        let mut s = first_order();
        s.d = dmatrix![1.0];
        assert!(matches!(h2_norm(&s), Err(LinalgError::NonzeroD { .. })));
        let mut s = first_order();
        s.a = dmatrix![1.0];
        assert!(matches!(h2_norm(&s), Err(LinalgError::UnstableA { .. })));
    }

    #[test]
    fn freq_response_examples() {
        let s = first_order();
        let g0 = freq_response(&s, 0.0).unwrap();
        assert!((g0[(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let g1 = freq_response(&s, 1.0).unwrap();
        assert!((g1[(0, 0)] - Complex64::new(0.5, -0.5)).norm() < 1e-15);
        let ginf = freq_response(&s, 1e9).unwrap();
        assert!(ginf[(0, 0)].norm() < 1e-8);
    }

    #[test]
    fn resonance_detected() {
        let s = StateSpace::new(
            dmatrix![0.0, 1.0; -1.0, 0.0],
            dmatrix![0.0; 1.0],
            dmatrix![1.0, 0.0],
            dmatrix![0.0],
        )
        .unwrap();
        assert!(matches!(
            freq_response(&s, 1.0),
            Err(LinalgError::ResonantFrequency { .. })
        ));
    }

    #[test]
    fn series_and_parallel_match_pointwise() {
        let g1 = first_order();
        let g2 =
            StateSpace::new(dmatrix![-2.0], dmatrix![1.0], dmatrix![3.0], dmatrix![0.5]).unwrap();
        for w in [0.0, 0.3, 2.0] {
            let a = freq_response(&g1, w).unwrap()[(0, 0)];
            let b = freq_response(&g2, w).unwrap()[(0, 0)];
            let s = freq_response(&g1.series(&g2).unwrap(), w).unwrap()[(0, 0)];
            let p = freq_response(&g1.parallel(&g2).unwrap(), w).unwrap()[(0, 0)];
            assert!((s - a * b).norm() < 1e-14);
            assert!((p - (a + b)).norm() < 1e-14);
        }
    }
}
