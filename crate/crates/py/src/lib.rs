//! Python bindings: plants, synthesis, controllers and certificates.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tlqg_core::cli::{DEFAULT_FREQ_HI, DEFAULT_FREQ_LO};
use tlqg_core::coupled_riccati::{
    residuals, solve_coupled, GainSet, SolverOptions, DEFAULT_LIN_TOL,
};
use tlqg_core::matops::{frequency_grid, Matrix, DEFAULT_ARE_TOL};
use tlqg_core::plant::{validate, TriangularPlant};
use tlqg_core::synthesis::{build_controller, optimal_cost, Controller};
use tlqg_core::verify::{certify, CertifyOptions, Level, DEFAULT_GRID_POINTS};

create_exception!(tlqg, TlqgError, PyException);
create_exception!(tlqg, PlantError, TlqgError);
create_exception!(tlqg, SynthesisError, TlqgError);

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_python<'py>(py: Python<'py>, value: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?
        .call_method1("loads", (value.to_string(),))
}

fn serialized<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| TlqgError::new_err(e.to_string()))?;
    to_python(py, &value)
}

fn plant_err(e: impl std::fmt::Display) -> PyErr {
    PlantError::new_err(e.to_string())
}

fn synth_err(e: impl std::fmt::Display) -> PyErr {
    SynthesisError::new_err(e.to_string())
}

fn parse_level(level: &str) -> PyResult<Level> {
    match level {
        "none" => Ok(Level::None),
        "structural" => Ok(Level::Structural),
        "full" => Ok(Level::Full),
        other => Err(TlqgError::new_err(format!(
            "unknown level {other:?}; expected none, structural or full"
        ))),
    }
}

/// Lower block triangular plant with its player partitions.
#[pyclass(name = "Plant", module = "tlqg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPlant {
    inner: TriangularPlant,
}

#[pymethods]
impl PyPlant {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        TriangularPlant::from_json(text)
            .map(|inner| Self { inner })
            .map_err(plant_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        TriangularPlant::load(path)
            .map(|inner| Self { inner })
            .map_err(plant_err)
    }

    #[staticmethod]
    fn scalar_example() -> Self {
        Self {
            inner: TriangularPlant::scalar_example(),
        }
    }

    #[staticmethod]
    fn two_player_example() -> Self {
        Self {
            inner: TriangularPlant::two_player_example(),
        }
    }

    /// Random plant passing validation.
    #[staticmethod]
    #[pyo3(signature = (seed, players, max_block = 2))]
    fn random(seed: u64, players: usize, max_block: usize) -> PyResult<Self> {
        if players == 0 || max_block == 0 {
            return Err(PlantError::new_err(
                "players and max_block must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: TriangularPlant::random_valid(&mut rng, players, max_block),
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn players(&self) -> usize {
        self.inner.players()
    }

    #[getter]
    fn states(&self) -> usize {
        self.inner.states()
    }

    #[getter]
    fn inputs(&self) -> usize {
        self.inner.inputs()
    }

    #[getter]
    fn outputs(&self) -> usize {
        self.inner.outputs()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale()
    }

    /// Named system matrix (`"A"`, `"B"`, `"C"`, `"F"`, `"H"`, `"W"` or `"V"`) as nested lists.
    fn matrix(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let p = &self.inner;
        let m = match name {
            "A" => p.a(),
            "B" => p.b(),
            "C" => p.c(),
            "F" => p.f(),
            "H" => p.h(),
            "W" => p.w(),
            "V" => p.v(),
            other => return Err(PlantError::new_err(format!("no matrix named {other:?}"))),
        };
        Ok(rows(m))
    }

    /// Well-posedness checks with margins.
    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialized(py, &validate(&self.inner))
    }

    fn chain_dual(&self) -> Self {
        Self {
            inner: self.inner.chain_dual(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Plant(players={}, states={}, inputs={}, outputs={})",
            self.inner.players(),
            self.inner.states(),
            self.inner.inputs(),
            self.inner.outputs()
        )
    }
}

/// Realization of a lower block triangular controller.
#[pyclass(name = "Controller", module = "tlqg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyController {
    inner: Controller,
}

#[pymethods]
impl PyController {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Controller::from_json(text)
            .map(|inner| Self { inner })
            .map_err(plant_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn a_k(&self) -> Vec<Vec<f64>> {
        rows(self.inner.a_k())
    }

    #[getter]
    fn b_k(&self) -> Vec<Vec<f64>> {
        rows(self.inner.b_k())
    }

    #[getter]
    fn c_k(&self) -> Vec<Vec<f64>> {
        rows(self.inner.c_k())
    }

    /// Largest upper-block entry of the transfer matrix over `freqs`.
    fn lbt_defect(&self, freqs: Vec<f64>) -> PyResult<f64> {
        self.inner.lbt_defect(&freqs).map_err(synth_err)
    }
}

/// Gains, cost and controller of one synthesis run.
#[pyclass(name = "Synthesis", module = "tlqg", frozen)]
pub struct PySynthesis {
    plant: TriangularPlant,
    gains: GainSet,
    controller: Controller,
}

impl PySynthesis {
    fn player(&self, i: usize) -> PyResult<usize> {
        if (1..=self.gains.players()).contains(&i) {
            Ok(i)
        } else {
            Err(PyIndexError::new_err(format!(
                "player {i} outside 1..={}",
                self.gains.players()
            )))
        }
    }
}

#[pymethods]
impl PySynthesis {
    #[getter]
    fn controller(&self) -> PyController {
        PyController {
            inner: self.controller.clone(),
        }
    }

    #[getter]
    fn plant(&self) -> PyPlant {
        PyPlant {
            inner: self.plant.clone(),
        }
    }

    /// Control gain of player `i` (1-based).
    fn k(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(self.gains.k(self.player(i)?)))
    }

    /// Filter gain of player `i` (1-based).
    fn l(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(self.gains.l(self.player(i)?)))
    }

    fn x(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(self.gains.x(self.player(i)?)))
    }

    fn y(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(self.gains.y(self.player(i)?)))
    }

    /// `{"j_opt", "j_cnt", "j_dcnt"}`.
    fn cost<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialized(py, &optimal_cost(&self.plant, &self.gains))
    }

    /// Residual of every coupled equation.
    fn residuals<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialized(py, &residuals(&self.plant, &self.gains))
    }

    /// Certificate for this controller, or for `controller` if given.
    #[pyo3(signature = (
        level = "full",
        seed = 0,
        controller = None,
        freq_lo = DEFAULT_FREQ_LO,
        freq_hi = DEFAULT_FREQ_HI,
        freq_n = DEFAULT_GRID_POINTS,
        trials = 200,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn certify<'py>(
        &self,
        py: Python<'py>,
        level: &str,
        seed: u64,
        controller: Option<PyRef<'py, PyController>>,
        freq_lo: f64,
        freq_hi: f64,
        freq_n: usize,
        trials: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts = CertifyOptions {
            level: parse_level(level)?,
            freqs: frequency_grid(freq_lo, freq_hi, freq_n),
            seed,
            trials,
            ..CertifyOptions::default()
        };
        let k = controller
            .map(|c| c.inner.clone())
            .unwrap_or_else(|| self.controller.clone());
        let report = py.detach(|| certify(&self.plant, &self.gains, &k, &opts));
        serialized(py, &report)
    }
}

/// Solves the coupled Riccati equations and builds the optimal controller.
#[pyfunction]
#[pyo3(signature = (plant, are_tol = DEFAULT_ARE_TOL, lin_tol = DEFAULT_LIN_TOL))]
fn synthesize(
    py: Python<'_>,
    plant: &PyPlant,
    are_tol: f64,
    lin_tol: f64,
) -> PyResult<PySynthesis> {
    let p = plant.inner.clone();
    py.detach(move || {
        let (gains, _) =
            solve_coupled(&p, SolverOptions { are_tol, lin_tol }).map_err(synth_err)?;
        let controller = build_controller(&p, &gains).map_err(synth_err)?;
        Ok(PySynthesis {
            plant: p,
            gains,
            controller,
        })
    })
}

#[pymodule]
fn tlqg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlant>()?;
    m.add_class::<PyController>()?;
    m.add_class::<PySynthesis>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add("TlqgError", m.py().get_type::<TlqgError>())?;
    m.add("PlantError", m.py().get_type::<PlantError>())?;
    m.add("SynthesisError", m.py().get_type::<SynthesisError>())?;
    Ok(())
}
