//! Controller realization, closed loop and optimal cost from a solved gain set.
//!
//! The controller keeps one `n`-dimensional state copy per player. Copy `i`
//! is driven by the outputs of players `1..=i` and feeds the inputs of
//! players `i..=N`, which makes its transfer function lower block triangular.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupled_riccati::GainSet;
use crate::matops::{
    block_diag, eigenvalues, freq_response, kron, max_abs, spectral_abscissa, LinalgError, Matrix,
    StateSpace,
};
use crate::plant::{json_error, matrix_from_rows, matrix_to_rows, PlantError, TriangularPlant};
use crate::structure::{
    blk, cols_of, incidence_bar, incidence_zeta_mu, put, rows_of, upper_block_defect, BlockRange,
    Partition,
};

/// Closed loops with spectral abscissa at or above this are rejected.
pub const STABILITY_MARGIN: f64 = -1e-10;

/// Version tag written into every controller document.
pub const CONTROLLER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("closed loop is not stable (spectral abscissa {abscissa:e})")]
    UnstableClosedLoop {
        abscissa: f64,
        eigenvalues: Vec<Complex64>,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Output-feedback controller `u = K y` with `D = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    realization: StateSpace,
    state_partition: Partition,
    input_partition: Partition,
    output_partition: Partition,
}

impl Controller {
    /// Wraps a realization; `input_partition` splits the plant inputs `u`
    /// (controller outputs) and `output_partition` the measurements `y`.
    pub fn new(
        realization: StateSpace,
        state_partition: Partition,
        input_partition: Partition,
        output_partition: Partition,
    ) -> Result<Self, SynthesisError> {
        let big_n = state_partition.players();
        let nk = state_partition.total() * big_n;
        if input_partition.players() != big_n || output_partition.players() != big_n {
            return Err(SynthesisError::DimensionMismatch(
                "partitions disagree on the number of players".into(),
            ));
        }
        if realization.states() != nk
            || realization.outputs() != input_partition.total()
            || realization.inputs() != output_partition.total()
        {
            return Err(SynthesisError::DimensionMismatch(format!(
                "controller realization has {} states, {} inputs, {} outputs; expected {nk}, {}, {}",
                realization.states(),
                realization.inputs(),
                realization.outputs(),
                output_partition.total(),
                input_partition.total()
            )));
        }
        Ok(Self {
            realization,
            state_partition,
            input_partition,
            output_partition,
        })
    }

    pub fn realization(&self) -> &StateSpace {
        &self.realization
    }
    pub fn a_k(&self) -> &Matrix {
        &self.realization.a
    }
    pub fn b_k(&self) -> &Matrix {
        &self.realization.b
    }
    pub fn c_k(&self) -> &Matrix {
        &self.realization.c
    }
    pub fn players(&self) -> usize {
        self.state_partition.players()
    }
    pub fn state_partition(&self) -> &Partition {
        &self.state_partition
    }
    pub fn input_partition(&self) -> &Partition {
        &self.input_partition
    }
    pub fn output_partition(&self) -> &Partition {
        &self.output_partition
    }

    /// Largest upper-block entry of `Re K(jw)` and `Im K(jw)` over `freqs`.
    pub fn lbt_defect(&self, freqs: &[f64]) -> Result<f64, SynthesisError> {
        transfer_lbt_defect(
            &self.realization,
            &self.input_partition,
            &self.output_partition,
            freqs,
        )
    }

    pub fn to_json(&self) -> String {
        let doc = ControllerDocument {
            schema_version: CONTROLLER_SCHEMA_VERSION,
            state_sizes: self.state_partition.sizes().to_vec(),
            input_sizes: self.input_partition.sizes().to_vec(),
            output_sizes: self.output_partition.sizes().to_vec(),
            a_k: matrix_to_rows(&self.realization.a),
            b_k: matrix_to_rows(&self.realization.b),
            c_k: matrix_to_rows(&self.realization.c),
        };
        serde_json::to_string_pretty(&doc).expect("controller document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlantError> {
        let doc: ControllerDocument = serde_json::from_str(text).map_err(json_error)?;
        if doc.schema_version != CONTROLLER_SCHEMA_VERSION {
            return Err(PlantError::Schema(format!(
                "unsupported controller schema_version {}",
                doc.schema_version
            )));
        }
        let np = Partition::new(doc.state_sizes)?;
        let mp = Partition::new(doc.input_sizes)?;
        let pp = Partition::new(doc.output_sizes)?;
        let nk = np.total() * np.players();
        let a = matrix_from_rows("A_K", &doc.a_k, nk)?;
        let b = matrix_from_rows("B_K", &doc.b_k, pp.total())?;
        let c = matrix_from_rows("C_K", &doc.c_k, nk)?;
        let sys =
            StateSpace::strictly_proper(a, b, c).map_err(|e| PlantError::Schema(e.to_string()))?;
        Self::new(sys, np, mp, pp).map_err(|e| PlantError::Schema(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlantError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Controller file format. `input_sizes` partitions the plant inputs `u`,
/// `output_sizes` the measurements `y`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerDocument {
    schema_version: u32,
    state_sizes: Vec<usize>,
    input_sizes: Vec<usize>,
    output_sizes: Vec<usize>,
    #[serde(rename = "A_K")]
    a_k: Vec<Vec<f64>>,
    #[serde(rename = "B_K")]
    b_k: Vec<Vec<f64>>,
    #[serde(rename = "C_K")]
    c_k: Vec<Vec<f64>>,
}

/// Largest upper-block entry of the real and imaginary parts of `G(jw)`
/// over `freqs`, with rows split by `rowp` and columns by `colp`.
pub fn transfer_lbt_defect(
    sys: &StateSpace,
    rowp: &Partition,
    colp: &Partition,
    freqs: &[f64],
) -> Result<f64, SynthesisError> {
    let mut defect = 0.0_f64;
    for &w in freqs {
        let g = freq_response(sys, w)?;
        for part in [g.map(|z| z.re), g.map(|z| z.im)] {
            let d = upper_block_defect(&part, rowp, colp)
                .map_err(|e| SynthesisError::DimensionMismatch(e.to_string()))?;
            defect = defect.max(d);
        }
    }
    Ok(defect)
}

fn check_gains(plant: &TriangularPlant, gains: &GainSet) -> Result<(), SynthesisError> {
    let big_n = plant.players();
    if gains.players() != big_n {
        return Err(SynthesisError::DimensionMismatch(format!(
            "gain set has {} players, plant has {big_n}",
            gains.players()
        )));
    }
    let (n, mp, pp) = (
        plant.states(),
        plant.input_partition(),
        plant.output_partition(),
    );
    for i in 1..=big_n {
        let shapes = [
            ("X", gains.x(i).shape(), (n, n)),
            ("Y", gains.y(i).shape(), (n, n)),
            ("K", gains.k(i).shape(), (mp.down(i).len(), n)),
            ("L", gains.l(i).shape(), (n, pp.up(i).len())),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(SynthesisError::DimensionMismatch(format!(
                    "{name}_{i} is {}x{}, expected {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
    }
    Ok(())
}

/// `E^{down i} K_i`: `K_i` placed in the rows of players `i..=N`; zero for `i = N + 1`.
pub(crate) fn k_embedded(plant: &TriangularPlant, gains: &GainSet, i: usize) -> Matrix {
    let (m, n) = (plant.inputs(), plant.states());
    let mut out = Matrix::zeros(m, n);
    if i <= plant.players() {
        put(
            &mut out,
            plant.input_partition().down(i),
            BlockRange::full(n),
            gains.k(i),
        );
    }
    out
}

/// `L_i E_{up i}`: `L_i` padded with zero columns to all `p` outputs.
pub(crate) fn l_embedded(plant: &TriangularPlant, gains: &GainSet, i: usize) -> Matrix {
    let (n, p) = (plant.states(), plant.outputs());
    let mut out = Matrix::zeros(n, p);
    put(
        &mut out,
        BlockRange::full(n),
        plant.output_partition().up(i),
        gains.l(i),
    );
    out
}

/// `B^{down i} K_i` (`n x n`).
fn bk(plant: &TriangularPlant, gains: &GainSet, i: usize) -> Matrix {
    plant.b() * k_embedded(plant, gains, i)
}

/// Optimal controller assembled block by block.
pub fn build_controller(
    plant: &TriangularPlant,
    gains: &GainSet,
) -> Result<Controller, SynthesisError> {
    check_gains(plant, gains)?;
    let (n, m, p, big_n) = (
        plant.states(),
        plant.inputs(),
        plant.outputs(),
        plant.players(),
    );
    let blk_range = |i: usize| BlockRange::new((i - 1) * n, i * n);
    let d: Vec<Matrix> = (1..=big_n + 1).map(|i| bk(plant, gains, i)).collect();

    let mut a_k = Matrix::zeros(n * big_n, n * big_n);
    let mut b_k = Matrix::zeros(n * big_n, p);
    let mut c_k = Matrix::zeros(m, n * big_n);
    for a in 1..=big_n {
        for b in 1..=a {
            let mut block = d[b - 1].clone();
            if a > b {
                block -= &d[b];
            } else {
                block +=
                    plant.a() + gains.l(a) * rows_of(plant.c(), plant.output_partition().up(a));
            }
            put(&mut a_k, blk_range(a), blk_range(b), &block);
        }
        put(
            &mut b_k,
            blk_range(a),
            BlockRange::full(p),
            &(-l_embedded(plant, gains, a)),
        );
        let c_block = k_embedded(plant, gains, a) - k_embedded(plant, gains, a + 1);
        put(&mut c_k, BlockRange::full(m), blk_range(a), &c_block);
    }
    Controller::new(
        StateSpace::strictly_proper(a_k, b_k, c_k)?,
        plant.state_partition().clone(),
        plant.input_partition().clone(),
        plant.output_partition().clone(),
    )
}

/// The same controller from the incidence-matrix products
/// `A_K = I (x) A + diag{L_i C_up_i} + zeta diag{B^down_i K_i} mu`,
/// `B_K = -col{L_i E_up_i}`, `C_K = row{E^down_i K_i} mu`.
pub fn build_controller_materialized(
    plant: &TriangularPlant,
    gains: &GainSet,
) -> Result<Controller, SynthesisError> {
    check_gains(plant, gains)?;
    let (n, big_n) = (plant.states(), plant.players());
    let (zeta, mu) = incidence_zeta_mu(n, big_n);
    let mut diag_lc = Matrix::zeros(0, 0);
    let mut diag_bk = Matrix::zeros(0, 0);
    let mut col_l = Matrix::zeros(0, plant.outputs());
    let mut row_k = Matrix::zeros(plant.inputs(), 0);
    for i in 1..=big_n {
        let c_up = rows_of(plant.c(), plant.output_partition().up(i));
        diag_lc = block_diag(&diag_lc, &(gains.l(i) * c_up));
        diag_bk = block_diag(&diag_bk, &bk(plant, gains, i));
        col_l = crate::structure::vcat(&col_l, &l_embedded(plant, gains, i));
        row_k = crate::structure::hcat(&row_k, &k_embedded(plant, gains, i));
    }
    let a_k = kron(&Matrix::identity(big_n, big_n), plant.a()) + diag_lc + &zeta * diag_bk * &mu;
    let b_k = -col_l;
    let c_k = row_k * &mu;
    Controller::new(
        StateSpace::strictly_proper(a_k, b_k, c_k)?,
        plant.state_partition().clone(),
        plant.input_partition().clone(),
        plant.output_partition().clone(),
    )
}

/// Closed loop of plant and controller with state `[x_K; x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    a: Matrix,
    b_w: Matrix,
    b_u: Matrix,
    c_z: Matrix,
    c_y: Matrix,
    h: Matrix,
    v: Matrix,
    states_per_copy: usize,
    players: usize,
}

impl ClosedLoop {
    /// State matrix `[[A_K, B_K C], [B C_K, A]]`.
    pub fn a(&self) -> &Matrix {
        &self.a
    }
    /// Disturbance input map `[B_K V; W]`.
    pub fn b_w(&self) -> &Matrix {
        &self.b_w
    }
    /// Control input map `[0; B]`.
    pub fn b_u(&self) -> &Matrix {
        &self.b_u
    }
    /// Performance output map `[H C_K, F]`.
    pub fn c_z(&self) -> &Matrix {
        &self.c_z
    }
    /// Measurement output map `[0, C]`.
    pub fn c_y(&self) -> &Matrix {
        &self.c_y
    }
    pub fn h(&self) -> &Matrix {
        &self.h
    }
    pub fn v(&self) -> &Matrix {
        &self.v
    }
    pub fn players(&self) -> usize {
        self.players
    }
    pub fn states_per_copy(&self) -> usize {
        self.states_per_copy
    }

    /// `w -> z`.
    pub fn g11(&self) -> StateSpace {
        StateSpace::strictly_proper(self.a.clone(), self.b_w.clone(), self.c_z.clone())
            .expect("closed-loop blocks are consistent")
    }
    /// Control-input channel to `z`.
    pub fn g12(&self) -> StateSpace {
        StateSpace::new(
            self.a.clone(),
            self.b_u.clone(),
            self.c_z.clone(),
            self.h.clone(),
        )
        .expect("closed-loop blocks are consistent")
    }
    /// `w` to the measurement channel.
    pub fn g21(&self) -> StateSpace {
        StateSpace::new(
            self.a.clone(),
            self.b_w.clone(),
            self.c_y.clone(),
            self.v.clone(),
        )
        .expect("closed-loop blocks are consistent")
    }
    pub fn g22(&self) -> StateSpace {
        StateSpace::strictly_proper(self.a.clone(), self.b_u.clone(), self.c_y.clone())
            .expect("closed-loop blocks are consistent")
    }

    /// The full two-port `[w; u'] -> [z; y']`.
    pub fn realization(&self) -> StateSpace {
        let (q, p) = (self.c_z.nrows(), self.c_y.nrows());
        let (r, m) = (self.b_w.ncols(), self.b_u.ncols());
        let b = crate::structure::hcat(&self.b_w, &self.b_u);
        let c = crate::structure::vcat(&self.c_z, &self.c_y);
        let mut d = Matrix::zeros(q + p, r + m);
        put(
            &mut d,
            BlockRange::new(0, q),
            BlockRange::new(r, r + m),
            &self.h,
        );
        put(
            &mut d,
            BlockRange::new(q, q + p),
            BlockRange::new(0, r),
            &self.v,
        );
        StateSpace::new(self.a.clone(), b, c, d).expect("closed-loop blocks are consistent")
    }
}

/// Interconnects plant and controller; fails unless the loop is strictly stable.
pub fn closed_loop(
    plant: &TriangularPlant,
    controller: &Controller,
) -> Result<ClosedLoop, SynthesisError> {
    let cl = closed_loop_unchecked(plant, controller)?;
    let abscissa = spectral_abscissa(&cl.a);
    if abscissa.is_nan() || abscissa >= STABILITY_MARGIN {
        return Err(SynthesisError::UnstableClosedLoop {
            abscissa,
            eigenvalues: eigenvalues(&cl.a),
        });
    }
    Ok(cl)
}

/// Interconnection without the stability check.
pub fn closed_loop_unchecked(
    plant: &TriangularPlant,
    controller: &Controller,
) -> Result<ClosedLoop, SynthesisError> {
    let k = controller.realization();
    if k.inputs() != plant.outputs() || k.outputs() != plant.inputs() {
        return Err(SynthesisError::DimensionMismatch(format!(
            "controller maps {} measurements to {} inputs, plant has {} and {}",
            k.inputs(),
            k.outputs(),
            plant.outputs(),
            plant.inputs()
        )));
    }
    let (n, nk) = (plant.states(), k.states());
    let a = crate::structure::block2(&k.a, &(&k.b * plant.c()), &(plant.b() * &k.c), plant.a());
    let b_w = crate::structure::vcat(&(&k.b * plant.v()), plant.w());
    let b_u = crate::structure::vcat(&Matrix::zeros(nk, plant.inputs()), plant.b());
    let c_z = crate::structure::hcat(&(plant.h() * &k.c), plant.f());
    let c_y = crate::structure::hcat(&Matrix::zeros(plant.outputs(), nk), plant.c());
    let players = nk.checked_div(n).unwrap_or(0);
    Ok(ClosedLoop {
        a,
        b_w,
        b_u,
        c_z,
        c_y,
        h: plant.h().clone(),
        v: plant.v().clone(),
        states_per_copy: n,
        players,
    })
}

/// `mu_bar A zeta_bar` for the `n(N+1)`-dimensional closed-loop state matrix.
pub fn block_triangularize(
    cl: &ClosedLoop,
    players: usize,
    n: usize,
) -> Result<Matrix, SynthesisError> {
    let dim = n * (players + 1);
    if cl.a.shape() != (dim, dim) {
        return Err(SynthesisError::DimensionMismatch(format!(
            "closed-loop state dimension {} is not n(N+1) = {dim}",
            cl.a.nrows()
        )));
    }
    let (zeta, mu) = incidence_bar(n, players);
    Ok(mu * &cl.a * zeta)
}

/// Largest entry strictly below the block diagonal, blocks of size `n`.
pub fn lower_block_defect(m: &Matrix, n: usize) -> f64 {
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let blocks = m.nrows() / n;
    let mut defect = 0.0_f64;
    for i in 1..blocks {
        for j in 0..i {
            let r = BlockRange::new(i * n, (i + 1) * n);
            let c = BlockRange::new(j * n, (j + 1) * n);
            defect = defect.max(max_abs(&blk(m, r, c)));
        }
    }
    defect
}

/// Diagonal block `k` (1-based) of size `n`.
pub fn diagonal_block(m: &Matrix, n: usize, k: usize) -> Matrix {
    let r = BlockRange::new((k - 1) * n, k * n);
    blk(m, r, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub j_opt: f64,
    pub j_cnt: f64,
    pub j_dcnt: f64,
}

/// Optimal cost split into the unconstrained part and the price of the
/// information constraint.
pub fn optimal_cost(plant: &TriangularPlant, gains: &GainSet) -> CostBreakdown {
    let big_n = plant.players();
    let (w, h) = (plant.w(), plant.h());
    let k1 = gains.k(1);
    let cnt2 = (w.transpose() * gains.x(1) * w).trace()
        + (plant.psi() * k1 * gains.y(big_n) * k1.transpose()).trace();
    let mut dcnt2 = 0.0;
    for j in 1..big_n {
        let hd = cols_of(h, plant.input_partition().down(j + 1));
        let diff = h * k1 - hd * gains.k(j + 1);
        dcnt2 += (&diff * gains.y(j) * diff.transpose()).trace();
    }
    let (cnt2, dcnt2) = (cnt2.max(0.0), dcnt2.max(0.0));
    CostBreakdown {
        j_opt: (cnt2 + dcnt2).sqrt(),
        j_cnt: cnt2.sqrt(),
        j_dcnt: dcnt2.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled_riccati::{solve_coupled, SolverOptions};
    use crate::matops::{frequency_grid, h2_norm};
    use crate::structure::upper_block_defect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synth(plant: &TriangularPlant) -> (GainSet, Controller) {
        let (gains, _) = solve_coupled(plant, SolverOptions::default()).unwrap();
        let k = build_controller(plant, &gains).unwrap();
        (gains, k)
    }

    #[test]
    fn scalar_controller_is_lqg() {
        let plant = TriangularPlant::scalar_example();
        let (_, k) = synth(&plant);
        let r = 2f64.sqrt() - 1.0;
        assert!((k.a_k()[(0, 0)] - (1.0 - 2.0 * 2f64.sqrt())).abs() < 1e-10);
        assert!((k.b_k()[(0, 0)] - r).abs() < 1e-10);
        assert!((k.c_k()[(0, 0)] + r).abs() < 1e-10);
        assert_eq!(k.realization().d, Matrix::zeros(1, 1));
    }

    #[test]
    fn blockwise_and_materialized_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for players in 1..=3 {
            let plant = TriangularPlant::random_valid(&mut rng, players, 2);
            let (gains, k) = synth(&plant);
            let km = build_controller_materialized(&plant, &gains).unwrap();
            let scale = 1.0 + max_abs(k.a_k());
            assert!(max_abs(&(k.a_k() - km.a_k())) < 1e-12 * scale);
            assert!(max_abs(&(k.b_k() - km.b_k())) < 1e-12 * scale);
            assert!(max_abs(&(k.c_k() - km.c_k())) < 1e-12 * scale);
        }
    }

    #[test]
    fn two_player_controller_is_lbt() {
        let plant = TriangularPlant::two_player_example();
        let (_, k) = synth(&plant);
        assert_eq!(k.realization().states(), 4);
        assert!(k.lbt_defect(&frequency_grid(1e-3, 1e3, 20)).unwrap() < 1e-9);
    }

    #[test]
    fn zero_gains_give_zero_controller() {
        let p = Partition::new(vec![1, 1]).unwrap();
        let plant = TriangularPlant::new(
            Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.5, -2.0]),
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Matrix::zeros(4, 2),
            Matrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            Matrix::zeros(2, 4),
            Matrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            p.clone(),
            p.clone(),
            p,
        )
        .unwrap();
        let (_, k) = synth(&plant);
        let expect = kron(&Matrix::identity(2, 2), plant.a());
        assert!(max_abs(&(k.a_k() - expect)) < 1e-12);
        assert!(max_abs(k.b_k()) < 1e-12);
        assert!(max_abs(k.c_k()) < 1e-12);
        let cl = closed_loop(&plant, &k).unwrap();
        assert!(max_abs(&(cl.a() - block_diag(&k.a_k().clone(), plant.a()))) < 1e-12);
    }

    #[test]
    fn scalar_closed_loop_spectrum() {
        let plant = TriangularPlant::scalar_example();
        let (gains, k) = synth(&plant);
        let cl = closed_loop(&plant, &k).unwrap();
        for l in eigenvalues(cl.a()) {
            assert!((l.re + 2f64.sqrt()).abs() < 1e-6 && l.im.abs() < 1e-6);
        }
        let t = block_triangularize(&cl, 1, 1).unwrap();
        assert!(lower_block_defect(&t, 1) < 1e-12);
        assert!((t[(0, 0)] - gains.closed_block(&plant, 1)[(0, 0)]).abs() < 1e-12);
        assert!((t[(1, 1)] - gains.closed_block(&plant, 2)[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn similarity_exposes_closed_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for plant in [
            TriangularPlant::two_player_example(),
            TriangularPlant::random_valid(&mut rng, 3, 2),
        ] {
            let (gains, k) = synth(&plant);
            let cl = closed_loop(&plant, &k).unwrap();
            let (n, big_n) = (plant.states(), plant.players());
            let t = block_triangularize(&cl, big_n, n).unwrap();
            assert!(lower_block_defect(&t, n) < 1e-9 * cl.a().norm());
            for i in 1..=big_n + 1 {
                let d = diagonal_block(&t, n, i) - gains.closed_block(&plant, i);
                assert!(max_abs(&d) < 1e-10 * (1.0 + cl.a().norm()));
                assert!(spectral_abscissa(&diagonal_block(&t, n, i)) < 0.0);
            }
        }
    }

    #[test]
    fn block_triangularize_checks_dimension() {
        let plant = TriangularPlant::scalar_example();
        let (_, k) = synth(&plant);
        let cl = closed_loop(&plant, &k).unwrap();
        assert!(matches!(
            block_triangularize(&cl, 2, 1),
            Err(SynthesisError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn unstable_loop_rejected() {
        let plant = TriangularPlant::scalar_example();
        let (_, k) = synth(&plant);
        let bad = StateSpace::strictly_proper(
            Matrix::from_element(1, 1, 1.0),
            k.b_k().clone(),
            k.c_k().clone(),
        )
        .unwrap();
        let bad = Controller::new(
            bad,
            plant.state_partition().clone(),
            plant.input_partition().clone(),
            plant.output_partition().clone(),
        )
        .unwrap();
        match closed_loop(&plant, &bad) {
            Err(SynthesisError::UnstableClosedLoop {
                abscissa,
                eigenvalues,
            }) => {
                assert!(abscissa > 0.0);
                assert_eq!(eigenvalues.len(), 2);
            }
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn scalar_cost() {
        let plant = TriangularPlant::scalar_example();
        let (gains, _) = synth(&plant);
        let c = optimal_cost(&plant, &gains);
        assert_eq!(c.j_dcnt, 0.0);
        assert!((c.j_cnt.powi(2) - (6.0 * 2f64.sqrt() - 8.0)).abs() < 1e-9);
        assert!((c.j_opt - 0.6966214).abs() < 1e-7);
    }

    #[test]
    fn cost_matches_closed_loop_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for plant in [
            TriangularPlant::two_player_example(),
            TriangularPlant::random_valid(&mut rng, 3, 3),
        ] {
            let (gains, k) = synth(&plant);
            let cl = closed_loop(&plant, &k).unwrap();
            let h2 = h2_norm(&cl.g11()).unwrap();
            let c = optimal_cost(&plant, &gains);
            assert!((h2 * h2 - c.j_opt * c.j_opt).abs() < 1e-6 * h2 * h2);
            let parts = c.j_cnt.powi(2) + c.j_dcnt.powi(2);
            assert!((c.j_opt.powi(2) - parts).abs() <= 4.0 * f64::EPSILON * parts);
        }
    }

    #[test]
    fn decoupled_players_pay_nothing_for_decentralization() {
        let p = Partition::new(vec![1, 1]).unwrap();
        let i2 = Matrix::identity(2, 2);
        let f = crate::structure::vcat(&i2, &Matrix::zeros(2, 2));
        let h = crate::structure::vcat(&Matrix::zeros(2, 2), &i2);
        let w = crate::structure::hcat(&i2, &Matrix::zeros(2, 2));
        let v = crate::structure::hcat(&Matrix::zeros(2, 2), &i2);
        let plant = TriangularPlant::new(
            Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.5]),
            i2.clone(),
            i2,
            f,
            h,
            w,
            v,
            p.clone(),
            p.clone(),
            p,
        )
        .unwrap();
        let (gains, _) = synth(&plant);
        let c = optimal_cost(&plant, &gains);
        assert!(c.j_dcnt < 1e-8, "j_dcnt = {}", c.j_dcnt);
    }

    #[test]
    fn controller_document_round_trip() {
        let plant = TriangularPlant::two_player_example();
        let (_, k) = synth(&plant);
        let text = k.to_json();
        assert!(text.contains("\"schema_version\": 1"));
        let back = Controller::from_json(&text).unwrap();
        assert_eq!(back, k);
        let bad = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(
            Controller::from_json(&bad),
            Err(PlantError::Schema(_))
        ));
    }

    #[test]
    fn transfer_defect_sees_upper_entries() {
        let p = Partition::new(vec![1, 1]).unwrap();
        let sys = StateSpace::strictly_proper(
            Matrix::from_element(1, 1, -1.0),
            Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
            Matrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let d = transfer_lbt_defect(&sys, &p, &p, &[0.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let g = freq_response(&sys, 0.0).unwrap().map(|z| z.re);
        assert_eq!(upper_block_defect(&g, &p, &p).unwrap(), d);
    }
}
