//! The 2N linearly coupled Riccati equations of the triangular LQG problem.
//!
//! For players `i = 1..N`:
//!
//! ```text
//! (X_1, K_1) = ARE_p(A, B, F, H)
//! (X_i, K_i) = ARE_p(A + L_{i-1} C_{up i-1}, B^{down i}, -H^{down i-1} K_{i-1}, H^{down i})
//! (Y_N, L_N) = ARE_d(A, C, W, V)
//! (Y_i, L_i) = ARE_d(A + B^{down i+1} K_{i+1}, C_{up i}, -L_{i+1} V_{up i+1}, V_{up i})
//! ```
//!
//! The unknowns are split into hat, bar and check blocks:
//!
//! ```text
//! X_i = [[Xc, Xb], [Xb', Xh]]   rows/cols (up i-1, down i)
//! K_i = [Kb, Kh]                cols      (up i-1, down i)
//! Y_i = [[Yh, Yb], [Yb', Yc]]   rows/cols (up i, down i+1)
//! L_i = [Lh; Lb]                rows      (up i, down i+1)
//! ```
//!
//! Hat blocks come from a forward chain of primal AREs and a backward chain of
//! dual AREs, bar blocks from one square linear system, and check blocks from
//! Lyapunov equations.

use std::fmt;

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::matops::{
    are_d_residual, are_p_residual, assemble_linear_operator, condition_1norm, fro, min_sym_eig,
    solve_are_d, solve_are_p, solve_lyapunov, spd_inverse, spectral_abscissa, LinalgError, Matrix,
    DEFAULT_ARE_TOL,
};
use crate::plant::TriangularPlant;
use crate::structure::{blk, block2, cols_of, hcat, rows_of, vcat, BlockRange};

/// Default reciprocal-condition floor for the bar-block linear system.
pub const DEFAULT_LIN_TOL: f64 = 1e-12;

/// Upper bound on step-2 refinement passes against the exact equations.
const STEP2_REFINEMENTS: usize = 4;

/// Upper bound on defect-correction passes for step-3 Lyapunov solves.
const LYAPUNOV_REFINEMENTS: usize = 2;

/// Numerical PSD floor, relative to `1 + ||X||`.
const PSD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    Control,
    Filter,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Control => write!(f, "control"),
            Side::Filter => write!(f, "filter"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoupledRiccatiError {
    #[error("{side} Riccati equation of player {stage} failed: {source}")]
    Are {
        side: Side,
        stage: usize,
        #[source]
        source: LinalgError,
    },
    #[error("bar-block linear system is singular to working precision (condition {cond:e})")]
    SingularStep2System { cond: f64 },
    #[error("diagonal block {which} of player {index} is not Hurwitz: {source}")]
    UnstableDiagonalBlock {
        which: &'static str,
        index: usize,
        #[source]
        source: LinalgError,
    },
    #[error("{which}_{index} is not positive semidefinite (smallest eigenvalue {min_eig:e})")]
    PsdViolation {
        which: &'static str,
        index: usize,
        min_eig: f64,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub are_tol: f64,
    pub lin_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            are_tol: DEFAULT_ARE_TOL,
            lin_tol: DEFAULT_LIN_TOL,
        }
    }
}

/// Hat blocks, indexed by player `i - 1`.
///
/// `x_hat[i]` is `n_{down i}` square, `k_hat[i]` is `m_{down i} x n_{down i}`,
/// `y_hat[i]` is `n_{up i}` square, `l_hat[i]` is `n_{up i} x p_{up i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HatParts {
    pub x_hat: Vec<Matrix>,
    pub k_hat: Vec<Matrix>,
    pub y_hat: Vec<Matrix>,
    pub l_hat: Vec<Matrix>,
    /// Residual norm of each sub-ARE, control chain then filter chain.
    pub are_residuals: Vec<f64>,
}

/// Bar blocks, indexed by player `i - 1`. The boundary entries that carry no
/// unknowns (`K_1`, `X_1` and `L_N`, `Y_N` bars) are empty matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BarParts {
    pub x_bar: Vec<Matrix>,
    pub k_bar: Vec<Matrix>,
    pub y_bar: Vec<Matrix>,
    pub l_bar: Vec<Matrix>,
    /// 1-norm condition number of the assembled operator (1 when empty).
    pub condition: f64,
    /// Max residual over the bar equations after the solve.
    pub residual: f64,
}

/// Check blocks, indexed by player `i - 1`; `x_check[0]` and `y_check[N-1]` are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckParts {
    pub x_check: Vec<Matrix>,
    pub y_check: Vec<Matrix>,
    pub residual: f64,
}

/// The full solution `(X_i, K_i, Y_i, L_i)` for `i = 1..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    x: Vec<Matrix>,
    k: Vec<Matrix>,
    y: Vec<Matrix>,
    l: Vec<Matrix>,
}

impl GainSet {
    /// Builds a gain set from full matrices without any checks.
    pub fn from_parts(x: Vec<Matrix>, k: Vec<Matrix>, y: Vec<Matrix>, l: Vec<Matrix>) -> Self {
        Self { x, k, y, l }
    }

    pub fn players(&self) -> usize {
        self.x.len()
    }
    /// `X_i`, `1 <= i <= N`.
    pub fn x(&self, i: usize) -> &Matrix {
        &self.x[i - 1]
    }
    /// `K_i`, `m_{down i} x n`.
    pub fn k(&self, i: usize) -> &Matrix {
        &self.k[i - 1]
    }
    pub fn y(&self, i: usize) -> &Matrix {
        &self.y[i - 1]
    }
    /// `L_i`, `n x p_{up i}`.
    pub fn l(&self, i: usize) -> &Matrix {
        &self.l[i - 1]
    }
    pub fn k_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.k[i - 1]
    }
    pub fn l_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.l[i - 1]
    }

    /// `A^{KL}_{i,i-1} = A + B^{down i} K_i + L_{i-1} C_{up i-1}` for `1 <= i <= N + 1`,
    /// with `K_{N+1} = 0` and `L_0 = 0`.
    pub fn closed_block(&self, plant: &TriangularPlant, i: usize) -> Matrix {
        let big_n = plant.players();
        let mut m = plant.a().clone();
        if i <= big_n {
            m += cols_of(plant.b(), plant.input_partition().down(i)) * self.k(i);
        }
        if i >= 2 {
            m += self.l(i - 1) * rows_of(plant.c(), plant.output_partition().up(i - 1));
        }
        m
    }

    /// Re-extracts the hat, bar and check blocks of player `i`.
    pub fn split(&self, plant: &TriangularPlant, i: usize) -> PlayerBlocks {
        let np = plant.state_partition();
        let (lo, hi) = (np.up(i - 1), np.down(i));
        let (ylo, yhi) = (np.up(i), down_or_empty(np, i + 1));
        PlayerBlocks {
            x_check: blk(self.x(i), lo, lo),
            x_bar: blk(self.x(i), lo, hi),
            x_hat: blk(self.x(i), hi, hi),
            k_bar: cols_of(self.k(i), lo),
            k_hat: cols_of(self.k(i), hi),
            y_hat: blk(self.y(i), ylo, ylo),
            y_bar: blk(self.y(i), ylo, yhi),
            y_check: blk(self.y(i), yhi, yhi),
            l_hat: rows_of(self.l(i), ylo),
            l_bar: rows_of(self.l(i), yhi),
        }
    }
}

/// Blocks of one player as returned by [`GainSet::split`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerBlocks {
    pub x_check: Matrix,
    pub x_bar: Matrix,
    pub x_hat: Matrix,
    pub k_bar: Matrix,
    pub k_hat: Matrix,
    pub y_hat: Matrix,
    pub y_bar: Matrix,
    pub y_check: Matrix,
    pub l_hat: Matrix,
    pub l_bar: Matrix,
}

/// `n_{down i}` range, valid also for `i = N + 1` (empty).
fn down_or_empty(p: &crate::structure::Partition, i: usize) -> BlockRange {
    if i > p.players() {
        BlockRange::new(p.total(), p.total())
    } else {
        p.down(i)
    }
}

/// Shared views of the plant data used by every step.
struct Ctx<'a> {
    plant: &'a TriangularPlant,
    psi: Matrix,
    phi: Matrix,
}

impl<'a> Ctx<'a> {
    fn new(plant: &'a TriangularPlant) -> Self {
        Self {
            plant,
            psi: plant.psi(),
            phi: plant.phi(),
        }
    }
    fn big_n(&self) -> usize {
        self.plant.players()
    }
    fn nd(&self, i: usize) -> BlockRange {
        down_or_empty(self.plant.state_partition(), i)
    }
    fn nu(&self, i: usize) -> BlockRange {
        self.plant.state_partition().up(i)
    }
    fn md(&self, i: usize) -> BlockRange {
        down_or_empty(self.plant.input_partition(), i)
    }
    fn pu(&self, i: usize) -> BlockRange {
        self.plant.output_partition().up(i)
    }
    fn psi_dd(&self, i: usize, j: usize) -> Matrix {
        blk(&self.psi, self.md(i), self.md(j))
    }
    fn phi_uu(&self, i: usize, j: usize) -> Matrix {
        blk(&self.phi, self.pu(i), self.pu(j))
    }

    /// `Ahat^K_i = A_{down i}^{down i} + B_{down i}^{down i} Khat_i`.
    fn ahat_k(&self, hats: &HatParts, i: usize) -> Matrix {
        let (nd, md) = (self.nd(i), self.md(i));
        blk(self.plant.a(), nd, nd) + blk(self.plant.b(), nd, md) * &hats.k_hat[i - 1]
    }
    /// `Abar^K_i = A_{down i}^{up i-1} + B_{down i}^{down i} Kbar_i`.
    fn abar_k(&self, kbar: &Matrix, i: usize) -> Matrix {
        let (nd, md) = (self.nd(i), self.md(i));
        blk(self.plant.a(), nd, self.nu(i - 1)) + blk(self.plant.b(), nd, md) * kbar
    }
    /// `Ahat^L_i = A_{up i}^{up i} + Lhat_i C_{up i}^{up i}`.
    fn ahat_l(&self, hats: &HatParts, i: usize) -> Matrix {
        let nu = self.nu(i);
        blk(self.plant.a(), nu, nu) + &hats.l_hat[i - 1] * blk(self.plant.c(), self.pu(i), nu)
    }
    /// `Abar^L_i = A_{down i+1}^{up i} + Lbar_i C_{up i}^{up i}`.
    fn abar_l(&self, lbar: &Matrix, i: usize) -> Matrix {
        let nu = self.nu(i);
        blk(self.plant.a(), self.nd(i + 1), nu) + lbar * blk(self.plant.c(), self.pu(i), nu)
    }
    /// `Khat^b_i`: columns of `Khat_i` belonging to blocks `i+1..N`.
    fn khat_b(&self, hats: &HatParts, i: usize) -> Matrix {
        cols_of(&hats.k_hat[i - 1], self.nd(i + 1).relative_to(&self.nd(i)))
    }
    /// `Khat^a_i`: columns of `Khat_i` belonging to block `i`.
    fn khat_a(&self, hats: &HatParts, i: usize) -> Matrix {
        let block = self.plant.state_partition().block(i);
        cols_of(&hats.k_hat[i - 1], block.relative_to(&self.nd(i)))
    }
    /// `Lhat^b_i`: rows of `Lhat_i` belonging to blocks `1..i-1`.
    fn lhat_b(&self, hats: &HatParts, i: usize) -> Matrix {
        rows_of(&hats.l_hat[i - 1], self.nu(i - 1))
    }
    /// `Lhat^a_i`: rows of `Lhat_i` belonging to block `i`.
    fn lhat_a(&self, hats: &HatParts, i: usize) -> Matrix {
        rows_of(&hats.l_hat[i - 1], self.plant.state_partition().block(i))
    }
    /// `K_{i-1} E^{up i-1} = [Kbar_{i-1}, Khat^a_{i-1}]`.
    fn upstream_k(&self, hats: &HatParts, k_bar: &[Matrix], i: usize) -> Matrix {
        hcat(&k_bar[i - 2], &self.khat_a(hats, i - 1))
    }
    /// `E_{down i+1} L_{i+1} = [Lhat^a_{i+1}; Lbar_{i+1}]`.
    fn downstream_l(&self, hats: &HatParts, l_bar: &[Matrix], i: usize) -> Matrix {
        vcat(&self.lhat_a(hats, i + 1), &l_bar[i])
    }
}

/// Step 1: the hat blocks from two independent chains of Riccati equations.
///
/// The control chain runs forward (`i = 1..N`), the filter chain backward
/// (`i = N..1`); the two chains run concurrently.
pub fn step1_sequential(
    plant: &TriangularPlant,
    are_tol: f64,
) -> Result<HatParts, CoupledRiccatiError> {
    let (control, filter) = rayon::join(
        || control_chain(plant, are_tol),
        || filter_chain(plant, are_tol),
    );
    let (x_hat, k_hat, mut res) = control?;
    let (y_hat, l_hat, res_f) = filter?;
    res.extend(res_f);
    Ok(HatParts {
        x_hat,
        k_hat,
        y_hat,
        l_hat,
        are_residuals: res,
    })
}

type Chain = (Vec<Matrix>, Vec<Matrix>, Vec<f64>);

fn control_chain(plant: &TriangularPlant, tol: f64) -> Result<Chain, CoupledRiccatiError> {
    let np = plant.state_partition();
    let mp = plant.input_partition();
    let are = |stage| {
        move |source| CoupledRiccatiError::Are {
            side: Side::Control,
            stage,
            source,
        }
    };
    let (x, k) = solve_are_p(plant.a(), plant.b(), plant.f(), plant.h(), tol).map_err(are(1))?;
    let mut res = vec![fro(&are_p_residual(
        plant.a(),
        plant.b(),
        plant.f(),
        plant.h(),
        &x,
    ))];
    let mut xs = vec![x];
    let mut ks = vec![k];
    for i in 2..=plant.players() {
        let (nd, md) = (np.down(i), mp.down(i));
        let a_i = blk(plant.a(), nd, nd);
        let b_i = blk(plant.b(), nd, md);
        let kb = cols_of(&ks[i - 2], nd.relative_to(&np.down(i - 1)));
        let f_i = -(cols_of(plant.h(), mp.down(i - 1)) * kb);
        let h_i = cols_of(plant.h(), md);
        let (x, k) = solve_are_p(&a_i, &b_i, &f_i, &h_i, tol).map_err(are(i))?;
        res.push(fro(&are_p_residual(&a_i, &b_i, &f_i, &h_i, &x)));
        xs.push(x);
        ks.push(k);
    }
    Ok((xs, ks, res))
}

fn filter_chain(plant: &TriangularPlant, tol: f64) -> Result<Chain, CoupledRiccatiError> {
    let np = plant.state_partition();
    let pp = plant.output_partition();
    let big_n = plant.players();
    let are = |stage| {
        move |source| CoupledRiccatiError::Are {
            side: Side::Filter,
            stage,
            source,
        }
    };
    let (y, l) =
        solve_are_d(plant.a(), plant.c(), plant.w(), plant.v(), tol).map_err(are(big_n))?;
    let mut res = vec![fro(&are_d_residual(
        plant.a(),
        plant.c(),
        plant.w(),
        plant.v(),
        &y,
    ))];
    let mut ys = vec![y];
    let mut ls = vec![l];
    for i in (1..big_n).rev() {
        let (nu, pu) = (np.up(i), pp.up(i));
        let a_i = blk(plant.a(), nu, nu);
        let c_i = blk(plant.c(), pu, nu);
        let lb = rows_of(ls.last().unwrap(), nu);
        let w_i = -(lb * rows_of(plant.v(), pp.up(i + 1)));
        let v_i = rows_of(plant.v(), pu);
        let (y, l) = solve_are_d(&a_i, &c_i, &w_i, &v_i, tol).map_err(are(i))?;
        res.push(fro(&are_d_residual(&a_i, &c_i, &w_i, &v_i, &y)));
        ys.push(y);
        ls.push(l);
    }
    ys.reverse();
    ls.reverse();
    res.reverse();
    Ok((ys, ls, res))
}

/// Shapes of the bar unknowns in their fixed vectorization order:
/// `Kbar_2, Xbar_2, ..., Kbar_N, Xbar_N, Lbar_1, Ybar_1, ..., Lbar_{N-1}, Ybar_{N-1}`.
fn bar_shapes(ctx: &Ctx) -> Vec<(usize, usize)> {
    let big_n = ctx.big_n();
    let mut shapes = Vec::new();
    for i in 2..=big_n {
        shapes.push((ctx.md(i).len(), ctx.nu(i - 1).len()));
        shapes.push((ctx.nu(i - 1).len(), ctx.nd(i).len()));
    }
    for i in 1..big_n {
        shapes.push((ctx.nd(i + 1).len(), ctx.pu(i).len()));
        shapes.push((ctx.nu(i).len(), ctx.nd(i + 1).len()));
    }
    shapes
}

struct Bars {
    x_bar: Vec<Matrix>,
    k_bar: Vec<Matrix>,
    y_bar: Vec<Matrix>,
    l_bar: Vec<Matrix>,
}

fn unpack(ctx: &Ctx, z: &DVector<f64>) -> Bars {
    let big_n = ctx.big_n();
    let (n, m, p) = (ctx.plant.states(), ctx.plant.inputs(), ctx.plant.outputs());
    let mut offset = 0;
    let mut take = |rows: usize, cols: usize| {
        let mat =
            Matrix::from_column_slice(rows, cols, &z.as_slice()[offset..offset + rows * cols]);
        offset += rows * cols;
        mat
    };
    let mut k_bar = vec![Matrix::zeros(m, 0)];
    let mut x_bar = vec![Matrix::zeros(0, n)];
    for i in 2..=big_n {
        k_bar.push(take(ctx.md(i).len(), ctx.nu(i - 1).len()));
        x_bar.push(take(ctx.nu(i - 1).len(), ctx.nd(i).len()));
    }
    let mut l_bar = Vec::new();
    let mut y_bar = Vec::new();
    for i in 1..big_n {
        l_bar.push(take(ctx.nd(i + 1).len(), ctx.pu(i).len()));
        y_bar.push(take(ctx.nu(i).len(), ctx.nd(i + 1).len()));
    }
    l_bar.push(Matrix::zeros(0, p));
    y_bar.push(Matrix::zeros(n, 0));
    Bars {
        x_bar,
        k_bar,
        y_bar,
        l_bar,
    }
}

fn pack(mats: &[Matrix]) -> DVector<f64> {
    let len = mats.iter().map(|m| m.len()).sum();
    let mut v = DVector::zeros(len);
    let mut offset = 0;
    for m in mats {
        v.as_mut_slice()[offset..offset + m.len()].copy_from_slice(m.as_slice());
        offset += m.len();
    }
    v
}

/// Left-hand sides of the bar equations, in the unknowns' order.
fn bar_equations(ctx: &Ctx, hats: &HatParts, bars: &Bars) -> Vec<Matrix> {
    let big_n = ctx.big_n();
    let b = ctx.plant.b();
    let mut eqs = Vec::with_capacity(4 * big_n);
    for i in 2..=big_n {
        let kbar = &bars.k_bar[i - 1];
        let xbar = &bars.x_bar[i - 1];
        let r = ctx.upstream_k(hats, &bars.k_bar, i);
        let psi_here = ctx.psi_dd(i, i);
        let psi_cross = ctx.psi_dd(i - 1, i);
        let psi_prev = ctx.psi_dd(i - 1, i - 1);
        let b_dd = blk(b, ctx.nd(i), ctx.md(i));
        // Upper block of the gain equation.
        eqs.push(kbar.transpose() * &psi_here + xbar * b_dd - r.transpose() * &psi_cross);
        // Upper-right block of the Lyapunov-like equation.
        let ahat_l = ctx.ahat_l(hats, i - 1);
        let abar_l = ctx.abar_l(&bars.l_bar[i - 2], i - 1);
        let ahat_k = ctx.ahat_k(hats, i);
        let coupling = psi_prev * ctx.khat_b(hats, i - 1) - psi_cross * &hats.k_hat[i - 1];
        eqs.push(
            ahat_l.transpose() * xbar
                + xbar * ahat_k
                + abar_l.transpose() * &hats.x_hat[i - 1]
                + r.transpose() * coupling,
        );
    }
    for i in 1..big_n {
        let lbar = &bars.l_bar[i - 1];
        let ybar = &bars.y_bar[i - 1];
        let s = ctx.downstream_l(hats, &bars.l_bar, i);
        let phi_here = ctx.phi_uu(i, i);
        let phi_cross = ctx.phi_uu(i, i + 1);
        let phi_next = ctx.phi_uu(i + 1, i + 1);
        let c_uu = blk(ctx.plant.c(), ctx.pu(i), ctx.nu(i));
        eqs.push(&phi_here * lbar.transpose() + c_uu * ybar - &phi_cross * s.transpose());
        let ahat_l = ctx.ahat_l(hats, i);
        let ahat_k = ctx.ahat_k(hats, i + 1);
        let abar_k = ctx.abar_k(&bars.k_bar[i], i + 1);
        let coupling = ctx.lhat_b(hats, i + 1) * phi_next - &hats.l_hat[i - 1] * phi_cross;
        eqs.push(
            ahat_l * ybar
                + ybar * ahat_k.transpose()
                + &hats.y_hat[i - 1] * abar_k.transpose()
                + coupling * s.transpose(),
        );
    }
    eqs
}

/// Solves `M z = rhs` by LU with one refinement pass, rejecting the system
/// when its reciprocal 1-norm condition number falls below `lin_tol`.
///
/// Returns the solution and the condition number.
pub fn solve_bar_system(
    m: &Matrix,
    rhs: &DVector<f64>,
    lin_tol: f64,
) -> Result<(DVector<f64>, f64), CoupledRiccatiError> {
    if m.nrows() == 0 {
        return Ok((DVector::zeros(0), 1.0));
    }
    let cond = condition_1norm(m);
    if !(cond.is_finite() && 1.0 / cond >= lin_tol) {
        return Err(CoupledRiccatiError::SingularStep2System { cond });
    }
    let lu = m.clone().lu();
    let singular = || CoupledRiccatiError::SingularStep2System { cond };
    let mut z = lu.solve(rhs).ok_or_else(singular)?;
    let r = rhs - m * &z;
    z += lu.solve(&r).ok_or_else(singular)?;
    Ok((z, cond))
}

/// Step 2: all bar blocks from one square linear system.
pub fn step2_linear(
    plant: &TriangularPlant,
    hats: &HatParts,
    lin_tol: f64,
) -> Result<BarParts, CoupledRiccatiError> {
    let ctx = Ctx::new(plant);
    let dim: usize = bar_shapes(&ctx).iter().map(|(r, c)| r * c).sum();
    let affine = |z: &DVector<f64>| pack(&bar_equations(&ctx, hats, &unpack(&ctx, z)));
    let offset = affine(&DVector::zeros(dim));
    let op = assemble_linear_operator(|z| affine(z) - &offset, dim, dim)?;
    let (mut z, cond) = solve_bar_system(&op, &(-&offset), lin_tol)?;
    let size = |bars: &Bars| {
        bar_equations(&ctx, hats, bars)
            .iter()
            .map(fro)
            .fold(0.0, f64::max)
    };
    let mut bars = unpack(&ctx, &z);
    let mut residual = size(&bars);
    // Refine against the directly evaluated equations; the probed operator
    // carries cancellation error from the affine offset.
    let lu = op.lu();
    for _ in 0..STEP2_REFINEMENTS * usize::from(dim > 0) {
        let Some(dz) = lu.solve(&affine(&z)) else {
            break;
        };
        let zn = &z - dz;
        let candidate = unpack(&ctx, &zn);
        let rn = size(&candidate);
        if !(rn < 0.5 * residual) {
            break;
        }
        z = zn;
        bars = candidate;
        residual = rn;
    }
    Ok(BarParts {
        x_bar: bars.x_bar,
        k_bar: bars.k_bar,
        y_bar: bars.y_bar,
        l_bar: bars.l_bar,
        condition: cond,
        residual,
    })
}

/// `A'X + XA + Q = 0` with defect-correction passes while they help.
fn refined_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, LinalgError> {
    let residual = |x: &Matrix| a.transpose() * x + x * a + q;
    let mut x = solve_lyapunov(a, q)?;
    let mut res = fro(&residual(&x));
    for _ in 0..LYAPUNOV_REFINEMENTS {
        let xn = &x + solve_lyapunov(a, &residual(&x))?;
        let rn = fro(&residual(&xn));
        if !(rn < 0.5 * res) {
            break;
        }
        x = xn;
        res = rn;
    }
    Ok(x)
}

/// Step 3: check blocks from Lyapunov equations.
pub fn step3_lyapunov(
    plant: &TriangularPlant,
    hats: &HatParts,
    bars: &BarParts,
) -> Result<CheckParts, CoupledRiccatiError> {
    let ctx = Ctx::new(plant);
    let big_n = ctx.big_n();
    let mut x_check = vec![Matrix::zeros(0, 0)];
    let mut y_check = Vec::new();
    let mut residual = 0.0_f64;
    for i in 2..=big_n {
        let ahat_l = ctx.ahat_l(hats, i - 1);
        let abar_l = ctx.abar_l(&bars.l_bar[i - 2], i - 1);
        let xbar = &bars.x_bar[i - 1];
        let kbar = &bars.k_bar[i - 1];
        let r = ctx.upstream_k(hats, &bars.k_bar, i);
        let q = abar_l.transpose() * xbar.transpose() + xbar * &abar_l
            - kbar.transpose() * ctx.psi_dd(i, i) * kbar
            + r.transpose() * ctx.psi_dd(i - 1, i - 1) * &r;
        let x = refined_lyapunov(&ahat_l, &q).map_err(|source| {
            CoupledRiccatiError::UnstableDiagonalBlock {
                which: "Ahat^L",
                index: i - 1,
                source,
            }
        })?;
        residual = residual.max(fro(&(ahat_l.transpose() * &x + &x * &ahat_l + &q)));
        x_check.push(x);
    }
    for i in 1..big_n {
        let ahat_k = ctx.ahat_k(hats, i + 1);
        let abar_k = ctx.abar_k(&bars.k_bar[i], i + 1);
        let ybar = &bars.y_bar[i - 1];
        let lbar = &bars.l_bar[i - 1];
        let s = ctx.downstream_l(hats, &bars.l_bar, i);
        let q = &abar_k * ybar + ybar.transpose() * abar_k.transpose()
            - lbar * ctx.phi_uu(i, i) * lbar.transpose()
            + &s * ctx.phi_uu(i + 1, i + 1) * s.transpose();
        let y = refined_lyapunov(&ahat_k.transpose(), &q).map_err(|source| {
            CoupledRiccatiError::UnstableDiagonalBlock {
                which: "Ahat^K",
                index: i + 1,
                source,
            }
        })?;
        residual = residual.max(fro(&(&ahat_k * &y + &y * ahat_k.transpose() + &q)));
        y_check.push(y);
    }
    y_check.push(Matrix::zeros(0, 0));
    Ok(CheckParts {
        x_check,
        y_check,
        residual,
    })
}

fn psd_check(which: &'static str, index: usize, m: &Matrix) -> Result<(), CoupledRiccatiError> {
    let min_eig = min_sym_eig(m);
    if min_eig < -PSD_FLOOR * (1.0 + fro(m)) {
        return Err(CoupledRiccatiError::PsdViolation {
            which,
            index,
            min_eig,
        });
    }
    Ok(())
}

/// Reassembles full `X_i, K_i, Y_i, L_i` from their blocks and checks PSD.
pub fn assemble_gains(
    plant: &TriangularPlant,
    hats: &HatParts,
    bars: &BarParts,
    checks: &CheckParts,
) -> Result<GainSet, CoupledRiccatiError> {
    let big_n = plant.players();
    let mut gains = GainSet {
        x: Vec::with_capacity(big_n),
        k: Vec::with_capacity(big_n),
        y: Vec::with_capacity(big_n),
        l: Vec::with_capacity(big_n),
    };
    for i in 0..big_n {
        let xbar = &bars.x_bar[i];
        gains.x.push(block2(
            &checks.x_check[i],
            xbar,
            &xbar.transpose(),
            &hats.x_hat[i],
        ));
        gains.k.push(hcat(&bars.k_bar[i], &hats.k_hat[i]));
        let ybar = &bars.y_bar[i];
        gains.y.push(block2(
            &hats.y_hat[i],
            ybar,
            &ybar.transpose(),
            &checks.y_check[i],
        ));
        gains.l.push(vcat(&hats.l_hat[i], &bars.l_bar[i]));
    }
    for i in 1..=big_n {
        psd_check("X", i, gains.x(i))?;
        psd_check("Y", i, gains.y(i))?;
    }
    Ok(gains)
}

/// Diagnostics of a full pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Sub-ARE residual norms, control chain (`i = 1..N`) then filter chain (`i = 1..N`).
    pub step1_are_residuals: Vec<f64>,
    pub step2_condition: f64,
    pub step2_residual: f64,
    pub step3_residual: f64,
    /// Spectral abscissa of `A^{KL}_{i,i-1}` for `i = 1..N+1`.
    pub closed_block_abscissae: Vec<f64>,
}

/// Runs steps 1 to 3 and assembles the gains.
pub fn solve_coupled(
    plant: &TriangularPlant,
    opts: SolverOptions,
) -> Result<(GainSet, StepReport), CoupledRiccatiError> {
    let hats = step1_sequential(plant, opts.are_tol)?;
    let bars = step2_linear(plant, &hats, opts.lin_tol)?;
    let checks = step3_lyapunov(plant, &hats, &bars)?;
    let gains = assemble_gains(plant, &hats, &bars, &checks)?;
    let report = StepReport {
        step1_are_residuals: hats.are_residuals.clone(),
        step2_condition: bars.condition,
        step2_residual: bars.residual,
        step3_residual: checks.residual,
        closed_block_abscissae: (1..=plant.players() + 1)
            .map(|i| spectral_abscissa(&gains.closed_block(plant, i)))
            .collect(),
    };
    Ok((gains, report))
}

/// Residual of one named equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquationResidual {
    pub equation: String,
    pub player: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub entries: Vec<EquationResidual>,
    /// Spectral abscissa of `A^{KL}_{i,i-1}` for `i = 1..N+1`.
    pub closed_block_abscissae: Vec<f64>,
    /// Smallest eigenvalue of each `X_i`, then each `Y_i`.
    pub x_min_eigs: Vec<f64>,
    pub y_min_eigs: Vec<f64>,
}

impl ResidualReport {
    pub fn max_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.norm).fold(0.0, f64::max)
    }
}

/// Evaluates every coupled equation by direct substitution.
///
/// Two forms are reported for each player: the Riccati form with its gain
/// formula (`are_p`/`gain_p`, `are_d`/`gain_d`), and the rearranged
/// Lyapunov-plus-gain form (`lyap_p`/`gain_eq_p`, `lyap_d`/`gain_eq_d`) for
/// the interior players.
pub fn residuals(plant: &TriangularPlant, gains: &GainSet) -> ResidualReport {
    let ctx = Ctx::new(plant);
    let big_n = plant.players();
    let (a, b, c, h, v) = (plant.a(), plant.b(), plant.c(), plant.h(), plant.v());
    let mut entries = Vec::new();
    let mut push = |equation: &str, player: usize, m: &Matrix| {
        entries.push(EquationResidual {
            equation: equation.to_string(),
            player,
            norm: fro(m),
        })
    };

    for i in 1..=big_n {
        let (a_eff, f_eff) = if i == 1 {
            (a.clone(), plant.f().clone())
        } else {
            (
                a + gains.l(i - 1) * rows_of(c, ctx.pu(i - 1)),
                -(cols_of(h, ctx.md(i - 1)) * gains.k(i - 1)),
            )
        };
        let b_eff = cols_of(b, ctx.md(i));
        let h_eff = cols_of(h, ctx.md(i));
        let x = gains.x(i);
        push(
            "are_p",
            i,
            &are_p_residual(&a_eff, &b_eff, &f_eff, &h_eff, x),
        );
        let psi_inv = spd_inverse(&(h_eff.transpose() * &h_eff));
        let k_formula = -(psi_inv * (x * &b_eff + f_eff.transpose() * &h_eff).transpose());
        push("gain_p", i, &(gains.k(i) - k_formula));
        if i >= 2 {
            let akl = gains.closed_block(plant, i);
            let d = cols_of(h, ctx.md(i)) * gains.k(i) - cols_of(h, ctx.md(i - 1)) * gains.k(i - 1);
            push(
                "lyap_p",
                i,
                &(akl.transpose() * x + x * &akl + d.transpose() * &d),
            );
            push(
                "gain_eq_p",
                i,
                &(gains.k(i).transpose() * ctx.psi_dd(i, i) + x * &b_eff
                    - gains.k(i - 1).transpose() * ctx.psi_dd(i - 1, i)),
            );
        }
    }

    for i in 1..=big_n {
        let (a_eff, w_eff) = if i == big_n {
            (a.clone(), plant.w().clone())
        } else {
            (
                a + cols_of(b, ctx.md(i + 1)) * gains.k(i + 1),
                -(gains.l(i + 1) * rows_of(v, ctx.pu(i + 1))),
            )
        };
        let c_eff = rows_of(c, ctx.pu(i));
        let v_eff = rows_of(v, ctx.pu(i));
        let y = gains.y(i);
        push(
            "are_d",
            i,
            &are_d_residual(&a_eff, &c_eff, &w_eff, &v_eff, y),
        );
        let phi_inv = spd_inverse(&(&v_eff * v_eff.transpose()));
        let l_formula = -((&c_eff * y + &v_eff * w_eff.transpose()).transpose() * phi_inv);
        push("gain_d", i, &(gains.l(i) - l_formula));
        if i < big_n {
            let akl = gains.closed_block(plant, i + 1);
            let d = gains.l(i) * &v_eff - gains.l(i + 1) * rows_of(v, ctx.pu(i + 1));
            push(
                "lyap_d",
                i,
                &(&akl * y + y * akl.transpose() + &d * d.transpose()),
            );
            push(
                "gain_eq_d",
                i,
                &(ctx.phi_uu(i, i) * gains.l(i).transpose() + c_eff * y
                    - ctx.phi_uu(i, i + 1) * gains.l(i + 1).transpose()),
            );
        }
    }

    ResidualReport {
        entries,
        closed_block_abscissae: (1..=big_n + 1)
            .map(|i| spectral_abscissa(&gains.closed_block(plant, i)))
            .collect(),
        x_min_eigs: (1..=big_n).map(|i| min_sym_eig(gains.x(i))).collect(),
        y_min_eigs: (1..=big_n).map(|i| min_sym_eig(gains.y(i))).collect(),
    }
}
