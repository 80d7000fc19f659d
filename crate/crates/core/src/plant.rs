//! Problem data for the triangular LQG problem and its validation.
//!
//! A plant is `dx = Ax + Ww + Bu`, `z = Fx + Hu`, `y = Cx + Vw` with `A`, `B`
//! and `C` lower block triangular over a chain of `N` subsystems.

use std::fs;
use std::path::Path;

use nalgebra::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matops::{
    dual_hamiltonian, eigenvalues, fro, imaginary_axis_margin, primal_hamiltonian, singular_values,
    ComplexMatrix, Matrix,
};
use crate::structure::{
    blk, default_lbt_tol, reversal, upper_block_defect, Partition, StructureError,
};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<StructureError> for PlantError {
    fn from(e: StructureError) -> Self {
        match e {
            StructureError::InvalidPartition(msg) => PlantError::Schema(msg),
            other => PlantError::Schema(other.to_string()),
        }
    }
}

/// Validated problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularPlant {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    f: Matrix,
    h: Matrix,
    w: Matrix,
    v: Matrix,
    np: Partition,
    mp: Partition,
    pp: Partition,
}

fn shape_check(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<(), PlantError> {
    if m.shape() != (rows, cols) {
        return Err(PlantError::Schema(format!(
            "{name} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(PlantError::Schema(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl TriangularPlant {
    /// Checks dimensions and lower block triangularity of `A`, `B`, `C`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Matrix,
        b: Matrix,
        c: Matrix,
        f: Matrix,
        h: Matrix,
        w: Matrix,
        v: Matrix,
        np: Partition,
        mp: Partition,
        pp: Partition,
    ) -> Result<Self, PlantError> {
        if np.players() != mp.players() || np.players() != pp.players() {
            return Err(PlantError::Schema(format!(
                "partitions have {}, {} and {} blocks",
                np.players(),
                mp.players(),
                pp.players()
            )));
        }
        let (n, m, p) = (np.total(), mp.total(), pp.total());
        let q = f.nrows();
        let r = w.ncols();
        shape_check("A", &a, n, n)?;
        shape_check("B", &b, n, m)?;
        shape_check("C", &c, p, n)?;
        shape_check("F", &f, q, n)?;
        shape_check("H", &h, q, m)?;
        shape_check("W", &w, n, r)?;
        shape_check("V", &v, p, r)?;
        for (name, mat, rows, cols) in [
            ("A", &a, &np, &np),
            ("B", &b, &np, &mp),
            ("C", &c, &pp, &np),
        ] {
            let defect = upper_block_defect(mat, rows, cols)?;
            let tol = default_lbt_tol(mat);
            if defect > tol {
                return Err(PlantError::Structure(format!(
                    "{name} is not lower block triangular (upper-block entry {defect:e} > {tol:e})"
                )));
            }
        }
        Ok(Self {
            a,
            b,
            c,
            f,
            h,
            w,
            v,
            np,
            mp,
            pp,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn b(&self) -> &Matrix {
        &self.b
    }
    pub fn c(&self) -> &Matrix {
        &self.c
    }
    pub fn f(&self) -> &Matrix {
        &self.f
    }
    pub fn h(&self) -> &Matrix {
        &self.h
    }
    pub fn w(&self) -> &Matrix {
        &self.w
    }
    pub fn v(&self) -> &Matrix {
        &self.v
    }
    pub fn state_partition(&self) -> &Partition {
        &self.np
    }
    pub fn input_partition(&self) -> &Partition {
        &self.mp
    }
    pub fn output_partition(&self) -> &Partition {
        &self.pp
    }

    /// Number of players `N`.
    pub fn players(&self) -> usize {
        self.np.players()
    }
    pub fn states(&self) -> usize {
        self.np.total()
    }
    pub fn inputs(&self) -> usize {
        self.mp.total()
    }
    pub fn outputs(&self) -> usize {
        self.pp.total()
    }
    pub fn perf_outputs(&self) -> usize {
        self.f.nrows()
    }
    pub fn noise_inputs(&self) -> usize {
        self.w.ncols()
    }

    /// `Psi = H'H`.
    pub fn psi(&self) -> Matrix {
        self.h.transpose() * &self.h
    }

    /// `Phi = VV'`.
    pub fn phi(&self) -> Matrix {
        &self.v * self.v.transpose()
    }

    /// Overall scale of the data, used for relative tolerances.
    pub fn scale(&self) -> f64 {
        [
            &self.a, &self.b, &self.c, &self.f, &self.h, &self.w, &self.v,
        ]
        .iter()
        .map(|m| fro(m))
        .fold(1.0, f64::max)
    }

    /// Copy with the noise channels `W`, `V` multiplied by `factor`.
    pub fn with_noise_scaled(&self, factor: f64) -> Self {
        let mut p = self.clone();
        p.w *= factor;
        p.v *= factor;
        p
    }

    /// The plant whose control problem is this plant's filtering problem read
    /// backwards along the chain, and vice versa.
    ///
    /// With `J` the exchange matrix of matching size: `A -> J A' J`,
    /// `B -> J C' J`, `C -> J B' J`, `F -> W' J`, `H -> V' J`, `W -> J F'`,
    /// `V -> J H'`; state blocks reversed, input and output partitions swapped
    /// and reversed.
    pub fn chain_dual(&self) -> Self {
        let (jn, jm, jp) = (
            reversal(self.states()),
            reversal(self.inputs()),
            reversal(self.outputs()),
        );
        let rev =
            |p: &Partition| Partition::new(p.sizes().iter().rev().copied().collect()).unwrap();
        Self::new(
            &jn * self.a.transpose() * &jn,
            &jn * self.c.transpose() * &jp,
            &jm * self.b.transpose() * &jn,
            self.w.transpose() * &jn,
            self.v.transpose() * &jp,
            &jn * self.f.transpose(),
            &jm * self.h.transpose(),
            rev(&self.np),
            rev(&self.pp),
            rev(&self.mp),
        )
        .expect("dual of a valid plant is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, PlantError> {
        let doc: PlantDocument = serde_json::from_str(text).map_err(json_error)?;
        doc.into_plant()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PlantDocument::from_plant(self))
            .expect("plant document serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlantError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Scalar single-player plant with independent unit process and
    /// measurement noise: `A=-1, B=C=1, F=[1;0], H=[0;1], W=[1 0], V=[0 1]`.
    pub fn scalar_example() -> Self {
        let one = Partition::new(vec![1]).unwrap();
        Self::new(
            Matrix::from_element(1, 1, -1.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_column_slice(2, 1, &[1.0, 0.0]),
            Matrix::from_column_slice(2, 1, &[0.0, 1.0]),
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
            one.clone(),
            one.clone(),
            one,
        )
        .unwrap()
    }

    /// Two scalar players in a chain: `A=[[-1,0],[1,-2]]`, `B=C=W=V=I`,
    /// `F=[I;0]`, `H=[0;I]`.
    pub fn two_player_example() -> Self {
        let p = Partition::new(vec![1, 1]).unwrap();
        let i2 = Matrix::identity(2, 2);
        let mut f = Matrix::zeros(4, 2);
        f.view_mut((0, 0), (2, 2)).copy_from(&i2);
        let mut h = Matrix::zeros(4, 2);
        h.view_mut((2, 0), (2, 2)).copy_from(&i2);
        Self::new(
            Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -2.0]),
            i2.clone(),
            i2.clone(),
            f,
            h,
            i2.clone(),
            i2,
            p.clone(),
            p.clone(),
            p,
        )
        .unwrap()
    }

    /// Random plant with `players` blocks of sizes in `1..=max_block`.
    ///
    /// Entries are uniform in `[-1, 1]`; `F`, `H`, `W`, `V` are dense with
    /// `q = n + m` performance outputs and `r = n + p` noise channels, so the
    /// rank conditions hold almost surely.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, players: usize, max_block: usize) -> Self {
        let mut sizes = || -> Partition {
            Partition::new(
                (0..players)
                    .map(|_| rng.random_range(1..=max_block))
                    .collect(),
            )
            .unwrap()
        };
        let np = sizes();
        let mp = sizes();
        let pp = sizes();
        let (n, m, p) = (np.total(), mp.total(), pp.total());
        let (q, r) = (n + m, n + p);
        let mut dense = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
        };
        let a = lower_part(dense(n, n), &np, &np);
        let b = lower_part(dense(n, m), &np, &mp);
        let c = lower_part(dense(p, n), &pp, &np);
        let f = dense(q, n);
        let h = dense(q, m);
        let w = dense(n, r);
        let v = dense(p, r);
        Self::new(a, b, c, f, h, w, v, np, mp, pp).unwrap()
    }

    /// Draws random plants until one passes validation.
    pub fn random_valid<R: Rng + ?Sized>(rng: &mut R, players: usize, max_block: usize) -> Self {
        loop {
            let p = Self::random(rng, players, max_block);
            if validate(&p).all_passed() {
                return p;
            }
        }
    }
}

fn lower_part(mut m: Matrix, rowp: &Partition, colp: &Partition) -> Matrix {
    for i in 1..=rowp.players() {
        for j in (i + 1)..=colp.players() {
            let (r, c) = (rowp.block(i), colp.block(j));
            m.view_mut((r.start, c.start), (r.len(), c.len())).fill(0.0);
        }
    }
    m
}

pub(crate) fn json_error(e: serde_json::Error) -> PlantError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Syntax | Category::Eof => PlantError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
        Category::Data => PlantError::Schema(e.to_string()),
        Category::Io => PlantError::Io(std::io::Error::other(e.to_string())),
    }
}

/// Row-major nested arrays to a matrix. An empty outer array becomes a
/// `0 x cols_if_empty` matrix.
pub(crate) fn matrix_from_rows(
    name: &str,
    rows: &[Vec<f64>],
    cols_if_empty: usize,
) -> Result<Matrix, PlantError> {
    let cols = rows.first().map_or(cols_if_empty, |r| r.len());
    if let Some(k) = rows.iter().position(|r| r.len() != cols) {
        return Err(PlantError::Schema(format!(
            "{name}: row {k} has {} entries, expected {cols}",
            rows[k].len()
        )));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantDocument {
    state_sizes: Vec<usize>,
    input_sizes: Vec<usize>,
    output_sizes: Vec<usize>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    f: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
}

impl PlantDocument {
    fn into_plant(self) -> Result<TriangularPlant, PlantError> {
        let np = Partition::new(self.state_sizes)?;
        let mp = Partition::new(self.input_sizes)?;
        let pp = Partition::new(self.output_sizes)?;
        let (n, m) = (np.total(), mp.total());
        let w = matrix_from_rows("W", &self.w, 0)?;
        let r = w.ncols();
        TriangularPlant::new(
            matrix_from_rows("A", &self.a, n)?,
            matrix_from_rows("B", &self.b, m)?,
            matrix_from_rows("C", &self.c, n)?,
            matrix_from_rows("F", &self.f, n)?,
            matrix_from_rows("H", &self.h, m)?,
            w,
            matrix_from_rows("V", &self.v, r)?,
            np,
            mp,
            pp,
        )
    }

    fn from_plant(p: &TriangularPlant) -> Self {
        Self {
            state_sizes: p.np.sizes().to_vec(),
            input_sizes: p.mp.sizes().to_vec(),
            output_sizes: p.pp.sizes().to_vec(),
            a: matrix_to_rows(&p.a),
            b: matrix_to_rows(&p.b),
            c: matrix_to_rows(&p.c),
            f: matrix_to_rows(&p.f),
            h: matrix_to_rows(&p.h),
            w: matrix_to_rows(&p.w),
            v: matrix_to_rows(&p.v),
        }
    }
}

/// One clause of the well-posedness checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Player index for per-block checks.
    pub block: Option<usize>,
    pub passed: bool,
    /// Numeric margin behind the verdict; `None` when nothing was tested
    /// (e.g. no unstable eigenvalues in a Hautus check).
    pub margin: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

const HAUTUS_UNSTABLE_FLOOR: f64 = -1e-9;
const HAUTUS_REL_TOL: f64 = 1e-8;
const RANK_REL_TOL: f64 = 1e-10;

fn complex_sigma_min(m: &ComplexMatrix) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, &s| acc.min(s))
}

/// Hautus test over the eigenvalues of `a` with `Re >= -1e-9`.
///
/// `stack` builds the test matrix from `a - lambda I`.
fn hautus(
    name: &str,
    block: usize,
    a: &Matrix,
    stack: impl Fn(&ComplexMatrix) -> ComplexMatrix,
) -> Check {
    let threshold = HAUTUS_REL_TOL * fro(a);
    let mut margin: Option<f64> = None;
    let mut worst = None;
    for lambda in eigenvalues(a) {
        if lambda.re < HAUTUS_UNSTABLE_FLOOR {
            continue;
        }
        let mut shifted = a.map(|x| Complex::new(x, 0.0));
        for k in 0..a.nrows() {
            shifted[(k, k)] -= lambda;
        }
        let s = complex_sigma_min(&stack(&shifted));
        if margin.is_none_or(|m| s < m) {
            margin = Some(s);
            worst = Some(lambda);
        }
    }
    let passed = margin.is_none_or(|m| m > threshold);
    let detail = match worst {
        None => "no eigenvalues in the closed right half-plane".to_string(),
        Some(l) if passed => format!("weakest mode {:.6}{:+.6}i", l.re, l.im),
        Some(l) => format!("mode {:.6}{:+.6}i fails the rank test", l.re, l.im),
    };
    Check {
        name: name.to_string(),
        block: Some(block),
        passed,
        margin,
        threshold: Some(threshold),
        detail,
    }
}

fn rank_check(name: &str, m: &Matrix, required: usize) -> Check {
    let s = singular_values(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let nonzero = s
        .iter()
        .filter(|&&x| smax > 0.0 && x > RANK_REL_TOL * smax)
        .count();
    let ratio = if s.len() >= required && required > 0 && smax > 0.0 {
        s[required - 1] / smax
    } else {
        0.0
    };
    Check {
        name: name.to_string(),
        block: None,
        passed: nonzero == required,
        margin: Some(ratio),
        threshold: Some(RANK_REL_TOL),
        detail: format!("rank {nonzero}, required {required}"),
    }
}

fn axis_check(name: &str, ham: Result<Matrix, crate::matops::LinalgError>) -> Check {
    match ham {
        Ok(ham) => {
            let (distance, threshold) = imaginary_axis_margin(&ham);
            Check {
                name: name.to_string(),
                block: None,
                passed: distance >= threshold,
                margin: Some(distance),
                threshold: Some(threshold),
                detail: "smallest |Re| of the Hamiltonian spectrum".to_string(),
            }
        }
        Err(e) => Check {
            name: name.to_string(),
            block: None,
            passed: false,
            margin: None,
            threshold: None,
            detail: e.to_string(),
        },
    }
}

fn lbt_check(name: &str, m: &Matrix, rowp: &Partition, colp: &Partition) -> Check {
    let defect = upper_block_defect(m, rowp, colp).unwrap_or(f64::INFINITY);
    let tol = default_lbt_tol(m);
    Check {
        name: name.to_string(),
        block: None,
        passed: defect <= tol,
        margin: Some(defect),
        threshold: Some(tol),
        detail: "largest entry above the block diagonal".to_string(),
    }
}

/// Runs every well-posedness check and reports margins. Never fails.
pub fn validate(plant: &TriangularPlant) -> ValidationReport {
    let (np, mp, pp) = (&plant.np, &plant.mp, &plant.pp);
    let mut checks = Vec::new();
    for i in 1..=plant.players() {
        let aii = blk(&plant.a, np.block(i), np.block(i));
        let bii = blk(&plant.b, np.block(i), mp.block(i)).map(|x| Complex::new(x, 0.0));
        checks.push(hautus("stabilizable", i, &aii, |s| {
            let mut m = ComplexMatrix::zeros(s.nrows(), s.ncols() + bii.ncols());
            m.view_mut((0, 0), s.shape()).copy_from(s);
            m.view_mut((0, s.ncols()), bii.shape()).copy_from(&bii);
            m
        }));
    }
    checks.push(rank_check("H_full_column_rank", &plant.h, plant.inputs()));
    checks.push(axis_check(
        "control_imaginary_axis",
        primal_hamiltonian(&plant.a, &plant.b, &plant.f, &plant.h),
    ));
    for i in 1..=plant.players() {
        let aii = blk(&plant.a, np.block(i), np.block(i));
        let cii = blk(&plant.c, pp.block(i), np.block(i)).map(|x| Complex::new(x, 0.0));
        checks.push(hautus("detectable", i, &aii, |s| {
            let mut m = ComplexMatrix::zeros(s.nrows() + cii.nrows(), s.ncols());
            m.view_mut((0, 0), s.shape()).copy_from(s);
            m.view_mut((s.nrows(), 0), cii.shape()).copy_from(&cii);
            m
        }));
    }
    checks.push(rank_check(
        "V_full_row_rank",
        &plant.v.transpose(),
        plant.outputs(),
    ));
    checks.push(axis_check(
        "filter_imaginary_axis",
        dual_hamiltonian(&plant.a, &plant.c, &plant.w, &plant.v),
    ));
    checks.push(lbt_check("A_lower_block_triangular", &plant.a, np, np));
    checks.push(lbt_check("B_lower_block_triangular", &plant.b, np, mp));
    checks.push(lbt_check("C_lower_block_triangular", &plant.c, pp, np));
    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64) -> TriangularPlant {
        let one = Partition::new(vec![1]).unwrap();
        TriangularPlant::new(
            dmatrix![a],
            dmatrix![b],
            dmatrix![1.0],
            dmatrix![1.0; 0.0],
            dmatrix![0.0; 1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            one.clone(),
            one.clone(),
            one,
        )
        .unwrap()
    }

    #[test]
    fn examples_validate() {
        assert!(validate(&TriangularPlant::scalar_example()).all_passed());
        let r = validate(&TriangularPlant::two_player_example());
        assert!(r.all_passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }

    #[test]
    fn unit_noise_scalar_plant_validates() {
        assert!(validate(&scalar(-1.0, 1.0)).all_passed());
    }

    #[test]
    fn uncontrollable_unstable_mode_fails() {
        let r = validate(&scalar(1.0, 0.0));
        let fail: Vec<_> = r.failures().collect();
        let stab = fail.iter().find(|c| c.name == "stabilizable").unwrap();
        assert_eq!(stab.block, Some(1));
        assert_eq!(stab.margin, Some(0.0));
        assert!(stab.detail.contains("1.000000"));
    }

    #[test]
    fn stable_uncontrollable_mode_passes() {
        let r = validate(&scalar(-1.0, 0.0));
        assert!(
            r.checks
                .iter()
                .find(|c| c.name == "stabilizable")
                .unwrap()
                .passed
        );
    }

    #[test]
    fn zero_h_fails_rank() {
        let p = TriangularPlant::scalar_example();
        let q = TriangularPlant::new(
            p.a.clone(),
            p.b.clone(),
            p.c.clone(),
            p.f.clone(),
            dmatrix![0.0; 0.0],
            p.w.clone(),
            p.v.clone(),
            p.np.clone(),
            p.mp.clone(),
            p.pp.clone(),
        )
        .unwrap();
        let r = validate(&q);
        assert!(
            !r.checks
                .iter()
                .find(|c| c.name == "H_full_column_rank")
                .unwrap()
                .passed
        );
        assert!(!r.all_passed());
    }

    #[test]
    fn imaginary_axis_zero_detected() {
        // A = 0, F = 0: the mode at s = 0 is unobservable from z.
        let one = Partition::new(vec![1]).unwrap();
        let p = TriangularPlant::new(
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.0; 0.0],
            dmatrix![0.0; 1.0],
            dmatrix![1.0, 0.0],
            dmatrix![0.0, 1.0],
            one.clone(),
            one.clone(),
            one,
        )
        .unwrap();
        let r = validate(&p);
        let c = r
            .checks
            .iter()
            .find(|c| c.name == "control_imaginary_axis")
            .unwrap();
        assert!(!c.passed);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [
            TriangularPlant::scalar_example(),
            TriangularPlant::two_player_example(),
            TriangularPlant::random(&mut rng, 3, 3),
        ] {
            let text = p.to_json();
            let back = TriangularPlant::from_json(&text).unwrap();
            assert_eq!(back, p);
            assert_eq!(back.to_json(), text);
        }
    }

    #[test]
    fn wrong_shape_is_schema_error() {
        let text = TriangularPlant::scalar_example().to_json().replacen(
            "\"A\": [\n    [\n      -1.0\n    ]\n  ]",
            "\"A\": [[-1.0, 2.0]]",
            1,
        );
        assert!(text.contains("[[-1.0, 2.0]]"));
        assert!(matches!(
            TriangularPlant::from_json(&text),
            Err(PlantError::Schema(_))
        ));
    }

    #[test]
    fn upper_block_entry_is_structure_error() {
        let mut v: serde_json::Value =
            serde_json::from_str(&TriangularPlant::two_player_example().to_json()).unwrap();
        v["A"][0][1] = serde_json::json!(0.1);
        let err = TriangularPlant::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, PlantError::Structure(_)), "{err}");
    }

    #[test]
    fn malformed_and_unknown_fields() {
        let err = TriangularPlant::from_json("{\n  \"A\": [[1,\n").unwrap_err();
        assert!(matches!(err, PlantError::Parse { line: 3, .. }), "{err}");
        let mut v: serde_json::Value =
            serde_json::from_str(&TriangularPlant::scalar_example().to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(matches!(
            TriangularPlant::from_json(&v.to_string()),
            Err(PlantError::Schema(_))
        ));
        let mut v: serde_json::Value =
            serde_json::from_str(&TriangularPlant::scalar_example().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("V");
        assert!(matches!(
            TriangularPlant::from_json(&v.to_string()),
            Err(PlantError::Schema(_))
        ));
        v["V"] = serde_json::json!([[0.0, 1.0]]);
        v["state_sizes"] = serde_json::json!([1, 0]);
        assert!(matches!(
            TriangularPlant::from_json(&v.to_string()),
            Err(PlantError::Schema(_))
        ));
    }

    #[test]
    fn random_plants_are_lbt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = TriangularPlant::random_valid(&mut rng, 3, 3);
            assert!(validate(&p).all_passed());
            assert!(
                upper_block_defect(p.a(), p.state_partition(), p.state_partition()).unwrap() == 0.0
            );
        }
    }
}
