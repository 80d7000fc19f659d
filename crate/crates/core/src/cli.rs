//! Batch front end: validate, synthesize and certify a plant file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::coupled_riccati::{
    residuals, solve_coupled, CoupledRiccatiError, GainSet, ResidualReport, SolverOptions,
    StepReport, DEFAULT_LIN_TOL,
};
use crate::matops::{frequency_grid, LinalgError, DEFAULT_ARE_TOL};
use crate::plant::{validate, PlantError, TriangularPlant, ValidationReport};
use crate::synthesis::{build_controller, optimal_cost, Controller, CostBreakdown};
use crate::verify::{certify, CertifyOptions, Level, DEFAULT_GRID_POINTS};

/// Version tag written into every report document.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_FREQ_LO: f64 = 1e-3;
pub const DEFAULT_FREQ_HI: f64 = 1e3;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Success,
    Io,
    AssumptionFailure,
    InvalidInput,
    SingularStep2,
    RiccatiFailure,
    CertificateFailure,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Io => 1,
            ExitStatus::AssumptionFailure => 2,
            ExitStatus::InvalidInput => 3,
            ExitStatus::SingularStep2 => 4,
            ExitStatus::RiccatiFailure => 5,
            ExitStatus::CertificateFailure => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: PlantError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Config(_) => ExitStatus::InvalidInput,
            CliError::Input {
                source: PlantError::Io(_),
                ..
            } => ExitStatus::Io,
            CliError::Input { .. } => ExitStatus::InvalidInput,
            CliError::Io { .. } => ExitStatus::Io,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tlqg", version, about = "Triangular LQG controller synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the well-posedness assumptions of a plant file.
    Validate(CommonArgs),
    /// Synthesize the optimal controller and its cost breakdown.
    Synth(CommonArgs),
    /// Synthesize (or load) a controller and certify its optimality.
    Certify(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Plant document.
    pub plant: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ARE_TOL)]
    pub are_tol: f64,
    #[arg(long, default_value_t = DEFAULT_LIN_TOL)]
    pub lin_tol: f64,
    #[arg(long, default_value_t = DEFAULT_FREQ_LO)]
    pub freq_lo: f64,
    #[arg(long, default_value_t = DEFAULT_FREQ_HI)]
    pub freq_hi: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub freq_n: usize,
    #[arg(long, value_enum, default_value_t = Level::Full)]
    pub level: Level,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Controller document to certify instead of the synthesized one.
    #[arg(long)]
    pub controller: Option<PathBuf>,
}

/// Validated run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub are_tol: f64,
    pub lin_tol: f64,
    pub freq_lo: f64,
    pub freq_hi: f64,
    pub freq_n: usize,
    pub level: Level,
    pub seed: u64,
    pub controller: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            out_dir: out_dir.into(),
            are_tol: DEFAULT_ARE_TOL,
            lin_tol: DEFAULT_LIN_TOL,
            freq_lo: DEFAULT_FREQ_LO,
            freq_hi: DEFAULT_FREQ_HI,
            freq_n: DEFAULT_GRID_POINTS,
            level: Level::Full,
            seed: 0,
            controller: None,
        }
    }

    pub fn check(&self) -> Result<(), CliError> {
        let positive = [
            ("are-tol", self.are_tol),
            ("lin-tol", self.lin_tol),
            ("freq-lo", self.freq_lo),
            ("freq-hi", self.freq_hi),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(CliError::Config(format!(
                    "--{name} must be positive and finite, got {value}"
                )));
            }
        }
        if self.freq_hi < self.freq_lo {
            return Err(CliError::Config(format!(
                "--freq-hi {} is below --freq-lo {}",
                self.freq_hi, self.freq_lo
            )));
        }
        if self.freq_n < 3 {
            return Err(CliError::Config(format!(
                "--freq-n must be at least 3, got {}",
                self.freq_n
            )));
        }
        Ok(())
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            are_tol: self.are_tol,
            lin_tol: self.lin_tol,
        }
    }

    pub fn freqs(&self) -> Vec<f64> {
        frequency_grid(self.freq_lo, self.freq_hi, self.freq_n)
    }
}

impl From<CommonArgs> for RunConfig {
    fn from(a: CommonArgs) -> Self {
        Self {
            input: a.plant,
            out_dir: a.out,
            are_tol: a.are_tol,
            lin_tol: a.lin_tol,
            freq_lo: a.freq_lo,
            freq_hi: a.freq_hi,
            freq_n: a.freq_n,
            level: a.level,
            seed: a.seed,
            controller: a.controller,
        }
    }
}

pub const VALIDATION_FILE: &str = "validation.json";
pub const CONTROLLER_FILE: &str = "controller.json";
pub const SYNTHESIS_FILE: &str = "synthesis.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";

/// Result of one command: exit status, files written and a one-line summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: ExitStatus,
    pub written: Vec<PathBuf>,
    pub message: String,
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.write_all(b"\n").map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, contents)?;
        self.written.push(path);
        Ok(())
    }

    fn finish(self, status: ExitStatus, message: impl Into<String>) -> Outcome {
        Outcome {
            status,
            written: self.written,
            message: message.into(),
        }
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn load_plant(config: &RunConfig) -> Result<TriangularPlant, CliError> {
    TriangularPlant::load(&config.input).map_err(|source| CliError::Input {
        path: config.input.clone(),
        source,
    })
}

fn describe_failures(report: &ValidationReport) -> String {
    report
        .failures()
        .map(|c| match c.block {
            Some(b) => format!("{}[{b}]", c.name),
            None => c.name.clone(),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn validation_document(report: &ValidationReport) -> Value {
    json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": "validate",
        "passed": report.all_passed(),
        "failures": report.failures().map(|c| json!({
            "name": c.name,
            "block": c.block,
            "detail": c.detail,
        })).collect::<Vec<_>>(),
        "checks": report.checks,
    })
}

/// Checks the plant assumptions and writes `validation.json`.
pub fn cmd_validate(config: &RunConfig) -> Result<Outcome, CliError> {
    config.check()?;
    let plant = load_plant(config)?;
    let report = validate(&plant);
    let mut out = Writer::new(&config.out_dir)?;
    out.put(VALIDATION_FILE, &pretty(&validation_document(&report)))?;
    Ok(if report.all_passed() {
        out.finish(ExitStatus::Success, "all assumption checks passed")
    } else {
        let names = describe_failures(&report);
        out.finish(
            ExitStatus::AssumptionFailure,
            format!("assumption checks failed: {names}"),
        )
    })
}

/// Imaginary-axis clauses are left to the Riccati solver so that they
/// surface as solver failures.
fn gating_failures(report: &ValidationReport) -> Vec<String> {
    report
        .failures()
        .filter(|c| !c.name.ends_with("imaginary_axis"))
        .map(|c| match c.block {
            Some(b) => format!("{}[{b}]", c.name),
            None => c.name.clone(),
        })
        .collect()
}

fn solver_failure_status(e: &CoupledRiccatiError) -> ExitStatus {
    match e {
        CoupledRiccatiError::SingularStep2System { .. } => ExitStatus::SingularStep2,
        _ => ExitStatus::RiccatiFailure,
    }
}

fn error_kind(e: &CoupledRiccatiError) -> &'static str {
    let linalg_kind = |l: &LinalgError| match l {
        LinalgError::SingularPsi { .. } => "SingularPsi",
        LinalgError::SingularPhi { .. } => "SingularPhi",
        LinalgError::ImaginaryAxisEigs { .. } => "ImaginaryAxisEigs",
        LinalgError::Inaccurate { .. } => "Inaccurate",
        LinalgError::UnstableA { .. } => "UnstableA",
        LinalgError::SpectraOverlap { .. } => "SpectraOverlap",
        LinalgError::ResonantFrequency { .. } => "ResonantFrequency",
        LinalgError::NonzeroD { .. } => "NonzeroD",
        LinalgError::DimensionMismatch(_) => "DimensionMismatch",
        _ => "Linalg",
    };
    match e {
        CoupledRiccatiError::Are { source, .. } => linalg_kind(source),
        CoupledRiccatiError::SingularStep2System { .. } => "SingularStep2System",
        CoupledRiccatiError::UnstableDiagonalBlock { .. } => "UnstableDiagonalBlock",
        CoupledRiccatiError::PsdViolation { .. } => "PsdViolation",
        CoupledRiccatiError::Linalg(l) => linalg_kind(l),
    }
}

fn solver_error_document(e: &CoupledRiccatiError) -> Value {
    let mut detail = json!({
        "kind": error_kind(e),
        "message": e.to_string(),
    });
    match e {
        CoupledRiccatiError::SingularStep2System { cond } => {
            detail["condition"] = json!(cond);
        }
        CoupledRiccatiError::Are {
            side,
            stage,
            source,
        } => {
            detail["side"] = json!(side);
            detail["player"] = json!(stage);
            if let LinalgError::ImaginaryAxisEigs {
                distance,
                threshold,
            } = source
            {
                detail["distance"] = json!(distance);
                detail["threshold"] = json!(threshold);
            }
        }
        _ => {}
    }
    detail
}

/// Everything a successful synthesis produces.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub plant: TriangularPlant,
    pub gains: GainSet,
    pub steps: StepReport,
    pub residuals: ResidualReport,
    pub cost: CostBreakdown,
    pub controller: Controller,
}

enum SynthStage {
    Done(Box<Synthesis>),
    Rejected(Outcome),
}

fn synthesize(config: &RunConfig, command: &str, out: &mut Writer) -> Result<SynthStage, CliError> {
    let plant = load_plant(config)?;
    let validation = validate(&plant);
    let gating = gating_failures(&validation);
    let base = |status: &str| {
        json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "command": command,
            "status": status,
        })
    };
    if !gating.is_empty() {
        let mut doc = base("assumption_failure");
        doc["validation"] = validation_document(&validation);
        out.put(SYNTHESIS_FILE, &pretty(&doc))?;
        return Ok(SynthStage::Rejected(Outcome {
            status: ExitStatus::AssumptionFailure,
            written: std::mem::take(&mut out.written),
            message: format!("assumption checks failed: {}", gating.join(", ")),
        }));
    }
    let (gains, steps) = match solve_coupled(&plant, config.solver_options()) {
        Ok(r) => r,
        Err(e) => {
            let mut doc = base("solver_failure");
            doc["error"] = solver_error_document(&e);
            out.put(SYNTHESIS_FILE, &pretty(&doc))?;
            return Ok(SynthStage::Rejected(Outcome {
                status: solver_failure_status(&e),
                written: std::mem::take(&mut out.written),
                message: e.to_string(),
            }));
        }
    };
    let controller = match build_controller(&plant, &gains) {
        Ok(c) => c,
        Err(e) => {
            let mut doc = base("solver_failure");
            doc["error"] = json!({ "kind": "Synthesis", "message": e.to_string() });
            out.put(SYNTHESIS_FILE, &pretty(&doc))?;
            return Ok(SynthStage::Rejected(Outcome {
                status: ExitStatus::RiccatiFailure,
                written: std::mem::take(&mut out.written),
                message: e.to_string(),
            }));
        }
    };
    let cost = optimal_cost(&plant, &gains);
    let residuals = residuals(&plant, &gains);
    Ok(SynthStage::Done(Box::new(Synthesis {
        plant,
        gains,
        steps,
        residuals,
        cost,
        controller,
    })))
}

fn synthesis_document(s: &Synthesis, command: &str) -> Value {
    json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": command,
        "status": "ok",
        "cost": s.cost,
        "max_residual": s.residuals.max_norm(),
        "residuals": s.residuals,
        "steps": s.steps,
    })
}

/// Synthesizes the controller; writes `controller.json` and `synthesis.json`.
pub fn cmd_synth(config: &RunConfig) -> Result<Outcome, CliError> {
    config.check()?;
    let mut out = Writer::new(&config.out_dir)?;
    let s = match synthesize(config, "synth", &mut out)? {
        SynthStage::Done(s) => s,
        SynthStage::Rejected(outcome) => return Ok(outcome),
    };
    out.put(CONTROLLER_FILE, &s.controller.to_json())?;
    out.put(SYNTHESIS_FILE, &pretty(&synthesis_document(&s, "synth")))?;
    let message = format!(
        "J_opt = {:.10}, J_cnt = {:.10}, J_dcnt = {:.10}",
        s.cost.j_opt, s.cost.j_cnt, s.cost.j_dcnt
    );
    Ok(out.finish(ExitStatus::Success, message))
}

/// Certifies the synthesized (or supplied) controller; writes `certificate.json`.
pub fn cmd_certify(config: &RunConfig) -> Result<Outcome, CliError> {
    config.check()?;
    let supplied = match &config.controller {
        Some(path) => Some(Controller::load(path).map_err(|source| CliError::Input {
            path: path.clone(),
            source,
        })?),
        None => None,
    };
    let mut out = Writer::new(&config.out_dir)?;
    let s = match synthesize(config, "certify", &mut out)? {
        SynthStage::Done(s) => s,
        SynthStage::Rejected(outcome) => return Ok(outcome),
    };
    let controller = supplied.unwrap_or_else(|| s.controller.clone());
    let opts = CertifyOptions {
        level: config.level,
        freqs: config.freqs(),
        seed: config.seed,
        ..CertifyOptions::default()
    };
    let report = certify(&s.plant, &s.gains, &controller, &opts);
    out.put(CERTIFICATE_FILE, &report.to_json())?;
    Ok(if report.passed() {
        out.finish(
            ExitStatus::Success,
            format!("{} certificate checks passed", report.checks.len()),
        )
    } else {
        let first = report
            .first_failure()
            .map(|c| format!("{} = {:e} (threshold {:e})", c.name, c.value, c.threshold))
            .or_else(|| report.error.clone())
            .unwrap_or_default();
        out.finish(
            ExitStatus::CertificateFailure,
            format!("certificate failed: {first}"),
        )
    })
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Validate(a) => cmd_validate(&a.into()),
        Command::Synth(a) => cmd_synth(&a.into()),
        Command::Certify(a) => cmd_certify(&a.into()),
    }
}
