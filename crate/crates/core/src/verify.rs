//! Optimality certificate for a synthesized controller.
//!
//! The checks here do not reuse the solver's equations. They rebuild the
//! closed loop, factor its input and output channels into inner and co-inner
//! pieces, and test that the projections which must vanish at the optimum do
//! vanish, both in closed form and on a frequency grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coupled_riccati::GainSet;
use crate::matops::{
    complex_spectral_norm, freq_response, frequency_grid, h2_norm, max_abs, min_sym_eig,
    sampled_peak_gain, solve_lyapunov, spectral_abscissa, sym_inv_sqrt, sym_sqrt, ComplexMatrix,
    LinalgError, Matrix, StateSpace,
};
use crate::plant::TriangularPlant;
use crate::structure::{blk, cols_of, hcat, put, rows_of, selector_cols, vcat, BlockRange};
use crate::synthesis::{
    block_triangularize, build_controller, closed_loop, k_embedded, l_embedded, lower_block_defect,
    optimal_cost, ClosedLoop, Controller, SynthesisError, STABILITY_MARGIN,
};

/// Version tag written into every certificate.
pub const CERTIFICATE_SCHEMA_VERSION: u32 = 1;

/// Default frequency grid size for sampled checks.
pub const DEFAULT_GRID_POINTS: usize = 20;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("Psi block {index} is singular (smallest eigenvalue {min_eig:e})")]
    SingularPsiBlock { index: usize, min_eig: f64 },
    #[error("Phi block {index} is singular (smallest eigenvalue {min_eig:e})")]
    SingularPhiBlock { index: usize, min_eig: f64 },
    #[error("factor is not stable (spectral abscissa {abscissa:e})")]
    UnstableFactor { abscissa: f64 },
    #[error("({i}, {j}) is not a node of the projection diagram for N = {players}")]
    IndexOutOfDiagram { i: usize, j: usize, players: usize },
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Default grid: `omega = 0` and 20 log-spaced points in `[1e-3, 1e3]`.
pub fn default_grid() -> Vec<f64> {
    frequency_grid(1e-3, 1e3, DEFAULT_GRID_POINTS)
}

/// Block selectors acting on the `n(N+1)`-dimensional closed-loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredSelectors {
    gain_rows: Vec<Matrix>,
    filter_cols: Vec<Matrix>,
    j_tilde: Vec<Matrix>,
    j_hat: Vec<Matrix>,
}

impl StructuredSelectors {
    pub fn build(plant: &TriangularPlant, gains: &GainSet) -> Self {
        let (n, m, big_n) = (plant.states(), plant.inputs(), plant.players());
        let dim = n * (big_n + 1);
        let slot = |k: usize| BlockRange::new((k - 1) * n, k * n);
        let eye = Matrix::identity(n, n);
        let mut gain_rows = Vec::with_capacity(big_n);
        let mut filter_cols = Vec::with_capacity(big_n);
        let mut j_tilde = Vec::with_capacity(big_n);
        let mut j_hat = Vec::with_capacity(big_n);
        for i in 1..=big_n {
            let mut row = Matrix::zeros(m, dim);
            for k in i..=big_n {
                let d = k_embedded(plant, gains, k + 1) - k_embedded(plant, gains, k);
                put(&mut row, BlockRange::full(m), slot(k), &d);
            }
            put(
                &mut row,
                BlockRange::full(m),
                slot(big_n + 1),
                &k_embedded(plant, gains, i),
            );
            gain_rows.push(rows_of(&row, plant.input_partition().down(i)));

            let pj = plant.output_partition().up(i);
            let mut col = Matrix::zeros(dim, pj.len());
            for k in 1..i {
                let pk = plant.output_partition().up(k);
                put(&mut col, slot(k), pk, gains.l(k));
            }
            for k in i..=big_n + 1 {
                put(&mut col, slot(k), BlockRange::full(pj.len()), gains.l(i));
            }
            filter_cols.push(col);

            let mut jt = Matrix::zeros(n, dim);
            if i >= 2 {
                put(&mut jt, BlockRange::full(n), slot(i - 1), &eye);
            }
            put(&mut jt, BlockRange::full(n), slot(big_n + 1), &(-&eye));
            j_tilde.push(jt);

            let mut jh = Matrix::zeros(dim, n);
            for k in i + 1..=big_n + 1 {
                put(&mut jh, slot(k), BlockRange::full(n), &eye);
            }
            j_hat.push(jh);
        }
        Self {
            gain_rows,
            filter_cols,
            j_tilde,
            j_hat,
        }
    }

    /// Gain selector of player `i`: `m_{down i} x n(N+1)`.
    pub fn gain_rows(&self, i: usize) -> &Matrix {
        &self.gain_rows[i - 1]
    }
    /// Filter selector of player `j`: `n(N+1) x p_{up j}`.
    pub fn filter_cols(&self, j: usize) -> &Matrix {
        &self.filter_cols[j - 1]
    }
    /// `+I` on state copy `i-1` (if any), `-I` on the plant copy.
    pub fn j_tilde(&self, i: usize) -> &Matrix {
        &self.j_tilde[i - 1]
    }
    /// `I` on copies `j+1..=N+1`.
    pub fn j_hat(&self, j: usize) -> &Matrix {
        &self.j_hat[j - 1]
    }
}

/// Inner factors `U_i`, their cofactors `M_i^{-1}`, co-inner factors `V_j`
/// and cofactors `N_j^{-1}`, all indexed from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub u: Vec<StateSpace>,
    pub m_inv: Vec<StateSpace>,
    pub v: Vec<StateSpace>,
    pub n_inv: Vec<StateSpace>,
}

impl FactorSet {
    pub fn u(&self, i: usize) -> &StateSpace {
        &self.u[i - 1]
    }
    pub fn m_inv(&self, i: usize) -> &StateSpace {
        &self.m_inv[i - 1]
    }
    pub fn v(&self, j: usize) -> &StateSpace {
        &self.v[j - 1]
    }
    pub fn n_inv(&self, j: usize) -> &StateSpace {
        &self.n_inv[j - 1]
    }
}

/// Transfer function `C (sI - A)^{-1} B` of one node of the projection diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResidual {
    pub i: usize,
    pub j: usize,
    pub realization: StateSpace,
}

impl ProjectionResidual {
    pub fn sampled_norm(&self, freqs: &[f64]) -> Result<f64, VerifyError> {
        Ok(sampled_peak_gain(&self.realization, freqs)?)
    }

    pub fn h2_norm(&self) -> Result<f64, VerifyError> {
        Ok(h2_norm(&self.realization)?)
    }
}

/// Squared norm of one residual edge, in closed form and from its realization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualNorm {
    pub from: [usize; 2],
    pub to: [usize; 2],
    pub closed_form: f64,
    pub realization: f64,
}

impl ResidualNorm {
    /// Relative gap with an absolute floor for edges that vanish.
    pub fn relative_gap(&self) -> f64 {
        let den = self
            .closed_form
            .abs()
            .max(self.realization.abs())
            .max(1e-300);
        let gap = (self.closed_form - self.realization).abs();
        if gap < 1e-14 {
            0.0
        } else {
            gap / den
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualTable {
    pub entries: Vec<ResidualNorm>,
    /// Closed-form squared norms along `(0,N+1) -> (1,N+1) -> (1,N) -> ... -> (1,1)`.
    pub telescoped: f64,
    /// `||G11||^2` from the closed-loop Gramian.
    pub closed_loop_h2_squared: f64,
}

impl ResidualTable {
    pub fn telescoping_gap(&self) -> f64 {
        (self.telescoped - self.closed_loop_h2_squared).abs()
            / self.closed_loop_h2_squared.abs().max(1e-300)
    }

    pub fn max_relative_gap(&self) -> f64 {
        self.entries
            .iter()
            .map(ResidualNorm::relative_gap)
            .fold(0.0, f64::max)
    }

    pub fn get(&self, from: [usize; 2], to: [usize; 2]) -> Option<&ResidualNorm> {
        self.entries.iter().find(|e| e.from == from && e.to == to)
    }
}

/// Everything needed to certify a controller against a gain set.
pub struct Certifier<'a> {
    plant: &'a TriangularPlant,
    gains: &'a GainSet,
    controller: Controller,
    cl: ClosedLoop,
    selectors: StructuredSelectors,
    psi_half: Vec<Matrix>,
    psi_inv_half: Vec<Matrix>,
    phi_half: Vec<Matrix>,
    phi_inv_half: Vec<Matrix>,
}

fn spd_root_pair(m: &Matrix) -> Option<(Matrix, Matrix, f64)> {
    let min_eig = min_sym_eig(m);
    if !(min_eig > 1e-12 * max_abs(m).max(1.0)) {
        return None;
    }
    Some((sym_sqrt(m), sym_inv_sqrt(m), min_eig))
}

impl<'a> Certifier<'a> {
    /// Certifier for the controller synthesized from `gains`.
    pub fn synthesized(
        plant: &'a TriangularPlant,
        gains: &'a GainSet,
    ) -> Result<Self, VerifyError> {
        let controller = build_controller(plant, gains)?;
        Self::new(plant, gains, controller)
    }

    /// Certifier for an externally supplied controller; the closed loop is
    /// built from `controller`, the selectors from `gains`.
    pub fn new(
        plant: &'a TriangularPlant,
        gains: &'a GainSet,
        controller: Controller,
    ) -> Result<Self, VerifyError> {
        let cl = closed_loop(plant, &controller)?;
        let selectors = StructuredSelectors::build(plant, gains);
        let (psi, phi) = (plant.psi(), plant.phi());
        let big_n = plant.players();
        let mut psi_half = Vec::with_capacity(big_n);
        let mut psi_inv_half = Vec::with_capacity(big_n);
        let mut phi_half = Vec::with_capacity(big_n);
        let mut phi_inv_half = Vec::with_capacity(big_n);
        for i in 1..=big_n {
            let md = plant.input_partition().down(i);
            let block = blk(&psi, md, md);
            let (h, ih, _) = spd_root_pair(&block).ok_or(VerifyError::SingularPsiBlock {
                index: i,
                min_eig: min_sym_eig(&block),
            })?;
            psi_half.push(h);
            psi_inv_half.push(ih);
            let pu = plant.output_partition().up(i);
            let block = blk(&phi, pu, pu);
            let (h, ih, _) = spd_root_pair(&block).ok_or(VerifyError::SingularPhiBlock {
                index: i,
                min_eig: min_sym_eig(&block),
            })?;
            phi_half.push(h);
            phi_inv_half.push(ih);
        }
        Ok(Self {
            plant,
            gains,
            controller,
            cl,
            selectors,
            psi_half,
            psi_inv_half,
            phi_half,
            phi_inv_half,
        })
    }

    pub fn closed_loop(&self) -> &ClosedLoop {
        &self.cl
    }
    pub fn controller(&self) -> &Controller {
        &self.controller
    }
    pub fn selectors(&self) -> &StructuredSelectors {
        &self.selectors
    }

    fn big_n(&self) -> usize {
        self.plant.players()
    }

    fn md(&self, i: usize) -> BlockRange {
        self.plant.input_partition().down(i)
    }

    fn pu(&self, j: usize) -> BlockRange {
        self.plant.output_partition().up(j)
    }

    /// `C_{U_i}`.
    fn c_u(&self, i: usize) -> Matrix {
        let (p, g) = (self.plant, self.gains);
        if i == 1 {
            p.f() + p.h() * g.k(1)
        } else {
            let d = k_embedded(p, g, i) - k_embedded(p, g, i - 1);
            &self.psi_half[i - 2] * rows_of(&d, self.md(i - 1))
        }
    }

    /// `B_{V_j}`.
    fn b_v(&self, j: usize) -> Matrix {
        let (p, g) = (self.plant, self.gains);
        if j == self.big_n() {
            p.w() + g.l(j) * p.v()
        } else {
            let d = l_embedded(p, g, j) - l_embedded(p, g, j + 1);
            cols_of(&d, self.pu(j + 1)) * &self.phi_half[j]
        }
    }

    pub fn build_factors(&self) -> Result<FactorSet, VerifyError> {
        let (p, g) = (self.plant, self.gains);
        let (m, pp, big_n) = (p.inputs(), p.outputs(), self.big_n());
        let mut set = FactorSet {
            u: Vec::with_capacity(big_n),
            m_inv: Vec::with_capacity(big_n),
            v: Vec::with_capacity(big_n),
            n_inv: Vec::with_capacity(big_n),
        };
        for i in 1..=big_n {
            let b_u = cols_of(p.b(), self.md(i)) * &self.psi_inv_half[i - 1];
            let d_u = if i == 1 {
                p.h() * &self.psi_inv_half[0]
            } else {
                let e = rows_of(&selector_cols(m, self.md(i)), self.md(i - 1));
                &self.psi_half[i - 2] * e * &self.psi_inv_half[i - 1]
            };
            set.u.push(StateSpace::new(
                g.closed_block(p, i),
                b_u,
                self.c_u(i),
                d_u,
            )?);
            set.m_inv.push(StateSpace::new(
                self.cl.a().clone(),
                cols_of(self.cl.b_u(), self.md(i)),
                -(&self.psi_half[i - 1] * self.selectors.gain_rows(i)),
                self.psi_half[i - 1].clone(),
            )?);

            let c_v = &self.phi_inv_half[i - 1] * rows_of(p.c(), self.pu(i));
            let d_v = if i == big_n {
                &self.phi_inv_half[i - 1] * p.v()
            } else {
                let e = rows_of(&selector_cols(pp, self.pu(i + 1)), self.pu(i));
                &self.phi_inv_half[i - 1] * e * &self.phi_half[i]
            };
            set.v.push(StateSpace::new(
                g.closed_block(p, i + 1),
                self.b_v(i),
                c_v,
                d_v,
            )?);
            set.n_inv.push(StateSpace::new(
                self.cl.a().clone(),
                -(self.selectors.filter_cols(i) * &self.phi_half[i - 1]),
                rows_of(self.cl.c_y(), self.pu(i)),
                self.phi_half[i - 1].clone(),
            )?);
        }
        Ok(set)
    }

    /// Relative mismatch of `G12 E^{down i}` against `U_1 ... U_i M_i^{-1}`
    /// over `freqs`.
    pub fn control_factorization_gap(
        &self,
        factors: &FactorSet,
        i: usize,
        freqs: &[f64],
    ) -> Result<f64, VerifyError> {
        let lhs_sys = StateSpace::new(
            self.cl.a().clone(),
            cols_of(self.cl.b_u(), self.md(i)),
            self.cl.c_z().clone(),
            cols_of(self.cl.h(), self.md(i)),
        )?;
        let mut gap = 0.0_f64;
        for &w in freqs {
            let lhs = freq_response(&lhs_sys, w)?;
            let mut rhs = freq_response(factors.u(1), w)?;
            for k in 2..=i {
                rhs *= freq_response(factors.u(k), w)?;
            }
            rhs *= freq_response(factors.m_inv(i), w)?;
            gap = gap.max(relative(&lhs, &rhs));
        }
        Ok(gap)
    }

    /// Relative mismatch of `E_{up j} G21` against `N_j^{-1} V_j ... V_N`.
    pub fn filter_factorization_gap(
        &self,
        factors: &FactorSet,
        j: usize,
        freqs: &[f64],
    ) -> Result<f64, VerifyError> {
        let lhs_sys = StateSpace::new(
            self.cl.a().clone(),
            self.cl.b_w().clone(),
            rows_of(self.cl.c_y(), self.pu(j)),
            rows_of(self.cl.v(), self.pu(j)),
        )?;
        let mut gap = 0.0_f64;
        for &w in freqs {
            let lhs = freq_response(&lhs_sys, w)?;
            let mut rhs = freq_response(factors.n_inv(j), w)?;
            for k in j..=self.big_n() {
                rhs *= freq_response(factors.v(k), w)?;
            }
            gap = gap.max(relative(&lhs, &rhs));
        }
        Ok(gap)
    }

    /// `Gamma_i`: `F_cl` for `i = 0`, otherwise `-Psi_{down i}^{1/2} K_sel_i`.
    fn gamma(&self, i: usize) -> Matrix {
        if i == 0 {
            self.cl.c_z().clone()
        } else {
            -(&self.psi_half[i - 1] * self.selectors.gain_rows(i))
        }
    }

    /// `Lambda_j`: `W_cl` for `j = N + 1`, otherwise `-L_sel_j Phi_{up j}^{1/2}`.
    fn lambda(&self, j: usize) -> Matrix {
        if j == self.big_n() + 1 {
            self.cl.b_w().clone()
        } else {
            -(self.selectors.filter_cols(j) * &self.phi_half[j - 1])
        }
    }

    pub fn projection_residual(
        &self,
        i: usize,
        j: usize,
    ) -> Result<ProjectionResidual, VerifyError> {
        let big_n = self.big_n();
        let valid = (i < j && j <= big_n + 1) || (i >= 1 && i == j && j <= big_n);
        if !valid {
            return Err(VerifyError::IndexOutOfDiagram {
                i,
                j,
                players: big_n,
            });
        }
        let realization =
            StateSpace::strictly_proper(self.cl.a().clone(), self.lambda(j), self.gamma(i))?;
        Ok(ProjectionResidual { i, j, realization })
    }

    /// `R_{(i-1,j)->(i,j)}` for `1 <= i <= N`, `i <= j <= N + 1`.
    fn downward_edge(&self, i: usize, j: usize) -> Result<ResidualNorm, VerifyError> {
        let (p, g) = (self.plant, self.gains);
        let upstream = if i >= 2 {
            l_embedded(p, g, i - 1) * p.v()
        } else {
            Matrix::zeros(p.states(), p.noise_inputs())
        };
        let target = if j <= self.big_n() {
            l_embedded(p, g, j) * p.v()
        } else {
            -p.w()
        };
        let mixed = upstream - target;
        let closed_form = (mixed.transpose() * g.x(i) * &mixed).trace();
        let sys = StateSpace::strictly_proper(
            g.closed_block(p, i),
            -(self.selectors.j_tilde(i) * self.lambda(j)),
            self.c_u(i),
        )?;
        let realization = squared_h2(&sys)?;
        Ok(ResidualNorm {
            from: [i - 1, j],
            to: [i, j],
            closed_form,
            realization,
        })
    }

    /// `R_{(i,j+1)->(i,j)}` for `0 <= i <= j`, `1 <= j <= N`.
    fn leftward_edge(&self, i: usize, j: usize) -> Result<ResidualNorm, VerifyError> {
        let (p, g) = (self.plant, self.gains);
        let downstream = p.h() * k_embedded(p, g, j + 1);
        let out = if i == 0 {
            p.f() + downstream
        } else {
            p.h() * k_embedded(p, g, i) - downstream
        };
        let closed_form = (&out * g.y(j) * out.transpose()).trace();
        let sys = StateSpace::strictly_proper(
            g.closed_block(p, j + 1),
            self.b_v(j),
            -(self.gamma(i) * self.selectors.j_hat(j)),
        )?;
        let realization = squared_h2(&sys)?;
        Ok(ResidualNorm {
            from: [i, j + 1],
            to: [i, j],
            closed_form,
            realization,
        })
    }

    pub fn residual_norms(&self) -> Result<ResidualTable, VerifyError> {
        let big_n = self.big_n();
        let mut entries = Vec::new();
        for i in 1..=big_n {
            for j in i..=big_n + 1 {
                entries.push(self.downward_edge(i, j)?);
            }
        }
        for i in 0..=big_n {
            for j in i.max(1)..=big_n {
                entries.push(self.leftward_edge(i, j)?);
            }
        }
        let find = |from: [usize; 2], to: [usize; 2]| {
            entries
                .iter()
                .find(|e| e.from == from && e.to == to)
                .map(|e| e.closed_form)
                .unwrap_or(0.0)
        };
        let mut telescoped = find([0, big_n + 1], [1, big_n + 1]);
        for j in 1..=big_n {
            telescoped += find([1, j + 1], [1, j]);
        }
        let closed_loop_h2_squared = squared_h2(&self.cl.g11())?;
        Ok(ResidualTable {
            entries,
            telescoped,
            closed_loop_h2_squared,
        })
    }

    /// Peak gain of the difference between the projected state and the
    /// estimate held by controller copy `j`.
    pub fn certainty_equivalence(&self, j: usize, freqs: &[f64]) -> Result<f64, VerifyError> {
        let n = self.plant.states();
        let big_n = self.big_n();
        let eye = Matrix::identity(n, n);
        let mut out = Matrix::zeros(n, n * (big_n + 1));
        put(
            &mut out,
            BlockRange::full(n),
            BlockRange::new((j - 1) * n, j * n),
            &(-&eye),
        );
        put(
            &mut out,
            BlockRange::full(n),
            BlockRange::new(big_n * n, (big_n + 1) * n),
            &eye,
        );
        let sys = StateSpace::strictly_proper(self.cl.a().clone(), self.lambda(j), out)?;
        Ok(sampled_peak_gain(&sys, freqs)?)
    }

    /// Peak gain of the cross-covariance between the estimation error of
    /// copy `j` and past values of `y_{up j}`, relative to that of the plant
    /// state itself (floored at 1); zero exactly when copy `j` holds the
    /// least-squares causal estimate of the plant state.
    ///
    /// Error and measurement share the closed-loop state, so the covariance
    /// at lag `tau >= 0` is `C_e exp(A tau) (P C_y' + W_cl V')` with `P` the
    /// closed-loop controllability Gramian.
    pub fn estimator_orthogonality(&self, j: usize, freqs: &[f64]) -> Result<f64, VerifyError> {
        let (n, big_n) = (self.plant.states(), self.big_n());
        let eye = Matrix::identity(n, n);
        let mut error_out = Matrix::zeros(n, n * (big_n + 1));
        put(
            &mut error_out,
            BlockRange::full(n),
            BlockRange::new((j - 1) * n, j * n),
            &(-&eye),
        );
        put(
            &mut error_out,
            BlockRange::full(n),
            BlockRange::new(big_n * n, (big_n + 1) * n),
            &eye,
        );
        let a = self.cl.a();
        let gramian = solve_lyapunov(&a.transpose(), &(self.cl.b_w() * self.cl.b_w().transpose()))?;
        let c_y = rows_of(self.cl.c_y(), self.pu(j));
        let v = rows_of(self.cl.v(), self.pu(j));
        let cross = gramian * c_y.transpose() + self.cl.b_w() * v.transpose();
        let mut state_out = Matrix::zeros(n, n * (big_n + 1));
        put(
            &mut state_out,
            BlockRange::full(n),
            BlockRange::new(big_n * n, (big_n + 1) * n),
            &eye,
        );
        let reference = StateSpace::strictly_proper(a.clone(), cross.clone(), state_out)?;
        let sys = StateSpace::strictly_proper(a.clone(), cross, error_out)?;
        let den = sampled_peak_gain(&reference, freqs)?.max(1.0);
        Ok(sampled_peak_gain(&sys, freqs)? / den)
    }
}

fn squared_h2(sys: &StateSpace) -> Result<f64, VerifyError> {
    if sys.states() > 0 {
        let abscissa = spectral_abscissa(&sys.a);
        if !(abscissa < 0.0) {
            return Err(VerifyError::UnstableFactor { abscissa });
        }
    }
    Ok(h2_norm(sys)?.powi(2))
}

fn relative(lhs: &ComplexMatrix, rhs: &ComplexMatrix) -> f64 {
    let den = complex_spectral_norm(lhs).max(1e-300);
    complex_spectral_norm(&(lhs - rhs)) / den
}

fn require_stable(sys: &StateSpace) -> Result<(), VerifyError> {
    if sys.states() > 0 {
        let abscissa = spectral_abscissa(&sys.a);
        if !(abscissa < 0.0) {
            return Err(VerifyError::UnstableFactor { abscissa });
        }
    }
    Ok(())
}

/// `max_w ||U(jw)^H U(jw) - I||_2`.
pub fn check_inner(u: &StateSpace, freqs: &[f64]) -> Result<f64, VerifyError> {
    require_stable(u)?;
    let eye = ComplexMatrix::identity(u.inputs(), u.inputs());
    let mut defect = 0.0_f64;
    for &w in freqs {
        let g = freq_response(u, w)?;
        defect = defect.max(complex_spectral_norm(&(g.adjoint() * &g - &eye)));
    }
    Ok(defect)
}

/// `max_w ||V(jw) V(jw)^H - I||_2`.
pub fn check_coinner(v: &StateSpace, freqs: &[f64]) -> Result<f64, VerifyError> {
    require_stable(v)?;
    let eye = ComplexMatrix::identity(v.outputs(), v.outputs());
    let mut defect = 0.0_f64;
    for &w in freqs {
        let g = freq_response(v, w)?;
        defect = defect.max(complex_spectral_norm(&(&g * g.adjoint() - &eye)));
    }
    Ok(defect)
}

pub fn build_factors(plant: &TriangularPlant, gains: &GainSet) -> Result<FactorSet, VerifyError> {
    Certifier::synthesized(plant, gains)?.build_factors()
}

pub fn projection_residual(
    plant: &TriangularPlant,
    gains: &GainSet,
    i: usize,
    j: usize,
) -> Result<ProjectionResidual, VerifyError> {
    Certifier::synthesized(plant, gains)?.projection_residual(i, j)
}

pub fn residual_norms(
    plant: &TriangularPlant,
    gains: &GainSet,
) -> Result<ResidualTable, VerifyError> {
    Certifier::synthesized(plant, gains)?.residual_norms()
}

/// Certainty-equivalence defect of controller copy `j` on the default grid.
pub fn certainty_equivalence_check(
    plant: &TriangularPlant,
    gains: &GainSet,
    j: usize,
) -> Result<f64, VerifyError> {
    Certifier::synthesized(plant, gains)?.certainty_equivalence(j, &default_grid())
}

/// Outcome of the random perturbation probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub trials: usize,
    pub evaluated: usize,
    pub destabilized: usize,
    pub scale: f64,
    pub seed: u64,
    pub nominal_cost: f64,
    /// Smallest `perturbed - nominal` squared cost over evaluated trials.
    pub worst_decrease: Option<f64>,
    pub mean_delta: Option<f64>,
}

/// Random stable strictly proper `m x p` transfer matrix, lower block
/// triangular over the plant's input and output partitions. Each allowed
/// entry is an independent SISO system of order 0, 1 or 2; numerator
/// coefficients are drawn in `[-scale, scale]`.
pub fn random_structured_parameter<R: Rng + ?Sized>(
    rng: &mut R,
    plant: &TriangularPlant,
    scale: f64,
) -> StateSpace {
    let (m, p) = (plant.inputs(), plant.outputs());
    let (mp, pp) = (plant.input_partition(), plant.output_partition());
    let mut entries: Vec<(usize, usize, Matrix, Matrix, Matrix)> = Vec::new();
    for a in 1..=plant.players() {
        for b in 1..=a {
            for row in mp.block(a).start..mp.block(a).end {
                for col in pp.block(b).start..pp.block(b).end {
                    let order = rng.random_range(0..=2usize);
                    let pole = |rng: &mut R| 0.1 + 2.0 * rng.random::<f64>();
                    let coef = |rng: &mut R| scale * rng.random_range(-1.0..=1.0);
                    let (aq, bq, cq) = match order {
                        0 => continue,
                        1 => (
                            Matrix::from_element(1, 1, -pole(rng)),
                            Matrix::from_element(1, 1, 1.0),
                            Matrix::from_element(1, 1, coef(rng)),
                        ),
                        _ => {
                            let (a0, a1) = (pole(rng), pole(rng));
                            (
                                Matrix::from_row_slice(2, 2, &[0.0, 1.0, -a0, -a1]),
                                Matrix::from_column_slice(2, 1, &[0.0, 1.0]),
                                Matrix::from_row_slice(1, 2, &[coef(rng), coef(rng)]),
                            )
                        }
                    };
                    entries.push((row, col, aq, bq, cq));
                }
            }
        }
    }
    let nq: usize = entries.iter().map(|e| e.2.nrows()).sum();
    let mut a = Matrix::zeros(nq, nq);
    let mut b = Matrix::zeros(nq, p);
    let mut c = Matrix::zeros(m, nq);
    let mut off = 0;
    for (row, col, aq, bq, cq) in entries {
        let k = aq.nrows();
        let r = BlockRange::new(off, off + k);
        put(&mut a, r, r, &aq);
        put(&mut b, r, BlockRange::new(col, col + 1), &bq);
        put(&mut c, BlockRange::new(row, row + 1), r, &cq);
        off += k;
    }
    StateSpace::strictly_proper(a, b, c).expect("consistent parameter realization")
}

/// `K' = -(I - Q G22)^{-1} Q` as a state-space interconnection.
pub fn controller_increment(q: &StateSpace, g22: &StateSpace) -> Result<StateSpace, VerifyError> {
    let aq_row = hcat(&q.a, &(&q.b * &g22.c));
    let ag_row = hcat(&(&g22.b * &q.c), &(&g22.a + &g22.b * &q.d * &g22.c));
    let a = vcat(&aq_row, &ag_row);
    let b = vcat(&q.b, &(&g22.b * &q.d));
    let c = hcat(&q.c, &(&q.d * &g22.c));
    Ok(StateSpace::new(a, b, c, q.d.clone())?.negate())
}

/// Closed loop of the plant with a general (possibly non-strictly-proper)
/// controller `u = K y`. `None` when the loop is not strictly stable.
fn loop_cost(plant: &TriangularPlant, k: &StateSpace) -> Result<Option<f64>, VerifyError> {
    let (a, b, c) = (plant.a(), plant.b(), plant.c());
    let top = hcat(&(a + b * &k.d * c), &(b * &k.c));
    let bottom = hcat(&(&k.b * c), &k.a);
    let acl = vcat(&top, &bottom);
    if acl.nrows() > 0 && !(spectral_abscissa(&acl) < STABILITY_MARGIN) {
        return Ok(None);
    }
    let bcl = vcat(&(plant.w() + b * &k.d * plant.v()), &(&k.b * plant.v()));
    let ccl = hcat(&(plant.f() + plant.h() * &k.d * c), &(plant.h() * &k.c));
    let dcl = plant.h() * &k.d * plant.v();
    let sys = StateSpace::new(acl, bcl, ccl, dcl)?;
    Ok(Some(h2_norm(&sys)?.powi(2)))
}

/// Probes optimality by adding random structured perturbations to `controller`.
///
/// Trial `t` draws from stream `t` of a ChaCha8 generator seeded with `seed`,
/// so results do not depend on the thread count.
pub fn perturbation_optimality(
    plant: &TriangularPlant,
    controller: &Controller,
    trials: usize,
    scale: f64,
    seed: u64,
) -> Result<PerturbationReport, VerifyError> {
    let cl = closed_loop(plant, controller)?;
    let g22 = cl.g22();
    let nominal_cost = loop_cost(plant, controller.realization())?.ok_or_else(|| {
        SynthesisError::UnstableClosedLoop {
            abscissa: spectral_abscissa(cl.a()),
            eigenvalues: Vec::new(),
        }
    })?;
    let deltas: Vec<Result<Option<f64>, VerifyError>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let q = random_structured_parameter(&mut rng, plant, scale);
            if max_abs(&q.c) == 0.0 && max_abs(&q.d) == 0.0 {
                return Ok(Some(0.0));
            }
            let increment = controller_increment(&q, &g22)?;
            let perturbed = controller.realization().parallel(&increment)?;
            Ok(loop_cost(plant, &perturbed)?.map(|c| c - nominal_cost))
        })
        .collect();
    let mut evaluated = Vec::with_capacity(trials);
    let mut destabilized = 0;
    for d in deltas {
        match d? {
            Some(x) => evaluated.push(x),
            None => destabilized += 1,
        }
    }
    let worst_decrease = evaluated.iter().copied().reduce(f64::min);
    let mean_delta =
        (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
    Ok(PerturbationReport {
        trials,
        evaluated: evaluated.len(),
        destabilized,
        scale,
        seed,
        nominal_cost,
        worst_decrease,
        mean_delta,
    })
}

/// How much of the certificate to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    None,
    Structural,
    Full,
}

/// Settings for [`certify`].
#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOptions {
    pub level: Level,
    pub freqs: Vec<f64>,
    pub seed: u64,
    pub trials: usize,
    pub perturbation_scale: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            level: Level::Full,
            freqs: default_grid(),
            seed: 0,
            trials: 200,
            perturbation_scale: 1e-3,
        }
    }
}

/// One named contract of the certificate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `true` when the contract is `value >= threshold` rather than `<=`.
    pub lower_bound: bool,
    pub passed: bool,
}

impl CertificateCheck {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            lower_bound: false,
            passed: value <= threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            lower_bound: true,
            passed: value >= threshold,
        }
    }

    fn failed(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: f64::MAX,
            threshold: 0.0,
            lower_bound: false,
            passed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub schema_version: u32,
    pub level: Level,
    pub checks: Vec<CertificateCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_norms: Option<ResidualTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&CertificateCheck> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

/// Runs the certificate for `controller` against the gains it should realize.
pub fn certify(
    plant: &TriangularPlant,
    gains: &GainSet,
    controller: &Controller,
    opts: &CertifyOptions,
) -> CertificateReport {
    let mut report = CertificateReport {
        schema_version: CERTIFICATE_SCHEMA_VERSION,
        level: opts.level,
        checks: Vec::new(),
        residual_norms: None,
        perturbation: None,
        error: None,
    };
    if opts.level == Level::None {
        return report;
    }
    if let Err(e) = certify_into(plant, gains, controller, opts, &mut report) {
        if report.checks.iter().all(|c| c.passed) {
            report.checks.push(CertificateCheck::failed(match e {
                VerifyError::Synthesis(SynthesisError::UnstableClosedLoop { .. }) => {
                    "closed_loop_stable"
                }
                _ => "certificate_evaluation",
            }));
        }
        report.error = Some(e.to_string());
    }
    report
}

fn certify_into(
    plant: &TriangularPlant,
    gains: &GainSet,
    controller: &Controller,
    opts: &CertifyOptions,
    report: &mut CertificateReport,
) -> Result<(), VerifyError> {
    let scale = plant.scale();
    let freqs = &opts.freqs;
    let (n, big_n) = (plant.states(), plant.players());
    let cert = Certifier::new(plant, gains, controller.clone())?;
    let checks = &mut report.checks;

    checks.push(CertificateCheck::at_most(
        "controller_lbt_defect",
        controller.lbt_defect(freqs)?,
        1e-8 * scale,
    ));
    let t = block_triangularize(cert.closed_loop(), big_n, n)?;
    checks.push(CertificateCheck::at_most(
        "closed_loop_lower_block_defect",
        lower_block_defect(&t, n),
        1e-9 * cert.closed_loop().a().norm(),
    ));
    for i in 1..=big_n {
        let norm = cert.projection_residual(i, i)?.sampled_norm(freqs)?;
        checks.push(CertificateCheck::at_most(
            format!("projection_zero[{i}]"),
            norm,
            1e-8 * scale,
        ));
    }
    for j in 1..=big_n {
        checks.push(CertificateCheck::at_most(
            format!("certainty_equivalence[{j}]"),
            cert.certainty_equivalence(j, freqs)?,
            1e-8 * scale,
        ));
        checks.push(CertificateCheck::at_most(
            format!("estimator_orthogonality[{j}]"),
            cert.estimator_orthogonality(j, freqs)?,
            1e-8,
        ));
    }
    if opts.level == Level::Structural {
        return Ok(());
    }

    let factors = cert.build_factors()?;
    for i in 1..=big_n {
        checks.push(CertificateCheck::at_most(
            format!("inner_defect[U{i}]"),
            check_inner(factors.u(i), freqs)?,
            1e-8,
        ));
        checks.push(CertificateCheck::at_most(
            format!("coinner_defect[V{i}]"),
            check_coinner(factors.v(i), freqs)?,
            1e-8,
        ));
        checks.push(CertificateCheck::at_most(
            format!("control_factorization[{i}]"),
            cert.control_factorization_gap(&factors, i, freqs)?,
            1e-8,
        ));
        checks.push(CertificateCheck::at_most(
            format!("filter_factorization[{i}]"),
            cert.filter_factorization_gap(&factors, i, freqs)?,
            1e-8,
        ));
    }
    let table = cert.residual_norms()?;
    for e in &table.entries {
        checks.push(CertificateCheck::at_most(
            format!(
                "residual_norm[({},{})->({},{})]",
                e.from[0], e.from[1], e.to[0], e.to[1]
            ),
            e.relative_gap(),
            1e-6,
        ));
    }
    checks.push(CertificateCheck::at_most(
        "telescoping",
        table.telescoping_gap(),
        1e-6,
    ));
    let cost = optimal_cost(plant, gains);
    let h2sq = table.closed_loop_h2_squared;
    checks.push(CertificateCheck::at_most(
        "cost_identity",
        (h2sq - cost.j_opt.powi(2)).abs() / h2sq.max(1e-300),
        1e-6,
    ));
    report.residual_norms = Some(table);

    let probe = perturbation_optimality(
        plant,
        controller,
        opts.trials,
        opts.perturbation_scale,
        opts.seed,
    )?;
    report.checks.push(CertificateCheck::at_least(
        "perturbation_worst_decrease",
        probe.worst_decrease.unwrap_or(f64::NEG_INFINITY),
        -1e-9,
    ));
    report.perturbation = Some(probe);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled_riccati::{solve_coupled, SolverOptions};
    use crate::structure::Partition;

    fn gains_of(plant: &TriangularPlant) -> GainSet {
        solve_coupled(plant, SolverOptions::default()).unwrap().0
    }

    #[test]
    fn identity_system_is_inner() {
        let u = StateSpace::new(
            Matrix::from_element(1, 1, -1.0),
            Matrix::zeros(1, 2),
            Matrix::zeros(2, 1),
            Matrix::identity(2, 2),
        )
        .unwrap();
        let grid = default_grid();
        assert_eq!(check_inner(&u, &grid).unwrap(), 0.0);
        let doubled = StateSpace {
            d: u.d.clone() * 2.0,
            ..u.clone()
        };
        assert!((check_inner(&doubled, &grid).unwrap() - 3.0).abs() < 1e-12);
        assert!((check_coinner(&doubled, &grid).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unstable_factor_rejected() {
        let u = StateSpace::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            Matrix::identity(1, 1),
        )
        .unwrap();
        assert!(matches!(
            check_inner(&u, &[0.0]),
            Err(VerifyError::UnstableFactor { .. })
        ));
    }

    #[test]
    fn scalar_factors_are_inner_and_coinner() {
        let plant = TriangularPlant::scalar_example();
        let gains = gains_of(&plant);
        let f = build_factors(&plant, &gains).unwrap();
        let grid = default_grid();
        assert!(check_inner(f.u(1), &grid).unwrap() < 1e-9);
        assert!(check_coinner(f.v(1), &grid).unwrap() < 1e-9);
    }

    #[test]
    fn two_player_factorizations() {
        let plant = TriangularPlant::two_player_example();
        let gains = gains_of(&plant);
        let cert = Certifier::synthesized(&plant, &gains).unwrap();
        let f = cert.build_factors().unwrap();
        let grid = default_grid();
        for i in 1..=2 {
            assert!(check_inner(f.u(i), &grid).unwrap() < 1e-8);
            assert!(check_coinner(f.v(i), &grid).unwrap() < 1e-8);
            assert!(cert.control_factorization_gap(&f, i, &grid).unwrap() < 1e-8);
            assert!(cert.filter_factorization_gap(&f, i, &grid).unwrap() < 1e-8);
        }
    }

    #[test]
    fn projection_diagram_indices() {
        let plant = TriangularPlant::two_player_example();
        let gains = gains_of(&plant);
        let cert = Certifier::synthesized(&plant, &gains).unwrap();
        for (i, j) in [(0, 0), (3, 3), (2, 1), (0, 4)] {
            assert!(matches!(
                cert.projection_residual(i, j),
                Err(VerifyError::IndexOutOfDiagram { .. })
            ));
        }
        let full = cert.projection_residual(0, 3).unwrap();
        assert_eq!(full.realization, cert.closed_loop().g11());
    }

    #[test]
    fn diagonal_projections_vanish() {
        let grid = default_grid();
        for plant in [
            TriangularPlant::scalar_example(),
            TriangularPlant::two_player_example(),
        ] {
            let gains = gains_of(&plant);
            for i in 1..=plant.players() {
                let r = projection_residual(&plant, &gains, i, i).unwrap();
                assert!(r.sampled_norm(&grid).unwrap() < 1e-8);
            }
        }
    }

    #[test]
    fn scalar_telescoping() {
        let plant = TriangularPlant::scalar_example();
        let gains = gains_of(&plant);
        let table = residual_norms(&plant, &gains).unwrap();
        assert!((table.telescoped - (6.0 * 2f64.sqrt() - 8.0)).abs() < 1e-9);
        assert!(table.telescoping_gap() < 1e-6);
        assert!(table.max_relative_gap() < 1e-6);
    }

    #[test]
    fn two_player_residual_table() {
        let plant = TriangularPlant::two_player_example();
        let gains = gains_of(&plant);
        let table = residual_norms(&plant, &gains).unwrap();
        assert!(table.max_relative_gap() < 1e-6, "{:#?}", table.entries);
        assert!(table.telescoping_gap() < 1e-6);
        assert!(table.get([0, 3], [1, 3]).is_some());
    }

    #[test]
    fn noise_free_leading_edge_is_zero() {
        let p = Partition::new(vec![1]).unwrap();
        let plant = TriangularPlant::new(
            Matrix::from_element(1, 1, -1.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_column_slice(2, 1, &[1.0, 0.0]),
            Matrix::from_column_slice(2, 1, &[0.0, 1.0]),
            Matrix::zeros(1, 1),
            Matrix::identity(1, 1),
            p.clone(),
            p.clone(),
            p,
        )
        .unwrap();
        let gains = gains_of(&plant);
        let table = residual_norms(&plant, &gains).unwrap();
        assert_eq!(table.get([0, 2], [1, 2]).unwrap().closed_form, 0.0);
        assert!(certainty_equivalence_check(&plant, &gains, 1).unwrap() < 1e-9);
    }

    #[test]
    fn certainty_equivalence_small() {
        for plant in [
            TriangularPlant::scalar_example(),
            TriangularPlant::two_player_example(),
        ] {
            let gains = gains_of(&plant);
            let cert = Certifier::synthesized(&plant, &gains).unwrap();
            for j in 1..=plant.players() {
                assert!(cert.certainty_equivalence(j, &default_grid()).unwrap() < 1e-9);
                assert!(cert.estimator_orthogonality(j, &default_grid()).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_scale_perturbations_change_nothing() {
        let plant = TriangularPlant::scalar_example();
        let gains = gains_of(&plant);
        let k = build_controller(&plant, &gains).unwrap();
        let r = perturbation_optimality(&plant, &k, 10, 0.0, 3).unwrap();
        assert_eq!(r.worst_decrease, Some(0.0));
        assert_eq!(r.mean_delta, Some(0.0));
    }

    #[test]
    fn scalar_perturbations_never_help() {
        let plant = TriangularPlant::scalar_example();
        let gains = gains_of(&plant);
        let k = build_controller(&plant, &gains).unwrap();
        let r = perturbation_optimality(&plant, &k, 100, 1e-3, 42).unwrap();
        assert!(r.worst_decrease.unwrap() >= -1e-9);
        assert_eq!(r.destabilized, 0);
    }

    #[test]
    fn perturbation_probe_is_deterministic() {
        let plant = TriangularPlant::two_player_example();
        let gains = gains_of(&plant);
        let k = build_controller(&plant, &gains).unwrap();
        let a = perturbation_optimality(&plant, &k, 16, 1e-3, 7).unwrap();
        let b = perturbation_optimality(&plant, &k, 16, 1e-3, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_parameter_is_lbt_and_stable() {
        let plant = TriangularPlant::two_player_example();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let q = random_structured_parameter(&mut rng, &plant, 1.0);
            assert!(q.is_stable());
            let d = crate::synthesis::transfer_lbt_defect(
                &q,
                plant.input_partition(),
                plant.output_partition(),
                &default_grid(),
            )
            .unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn full_certificate_passes_and_none_is_empty() {
        let plant = TriangularPlant::two_player_example();
        let gains = gains_of(&plant);
        let k = build_controller(&plant, &gains).unwrap();
        let report = certify(&plant, &gains, &k, &CertifyOptions::default());
        assert!(
            report.passed(),
            "{:?} {:?}",
            report.first_failure(),
            report.error
        );
        let none = certify(
            &plant,
            &gains,
            &k,
            &CertifyOptions {
                level: Level::None,
                ..CertifyOptions::default()
            },
        );
        assert!(none.checks.is_empty() && none.passed());
    }

    #[test]
    fn corrupted_controller_fails_certificate() {
        let plant = TriangularPlant::two_player_example();
        let gains = gains_of(&plant);
        let k = build_controller(&plant, &gains).unwrap();
        let mut sys = k.realization().clone();
        sys.c[(1, 2)] += 0.1;
        let bad = Controller::new(
            sys,
            k.state_partition().clone(),
            k.input_partition().clone(),
            k.output_partition().clone(),
        )
        .unwrap();
        let report = certify(&plant, &gains, &bad, &CertifyOptions::default());
        assert!(!report.passed());
    }
}
