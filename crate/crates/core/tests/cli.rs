use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;
use tlqg_core::matops::Matrix;
use tlqg_core::plant::TriangularPlant;

fn tlqg(args: &[&str], out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_tlqg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn write_plant(dir: &Path, name: &str, plant: &TriangularPlant) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, plant.to_json()).unwrap();
    path
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn unstabilizable_second_block() -> TriangularPlant {
    let p2 = TriangularPlant::two_player_example();
    TriangularPlant::new(
        Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 2.0]),
        Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        p2.c().clone(),
        p2.f().clone(),
        p2.h().clone(),
        p2.w().clone(),
        p2.v().clone(),
        p2.state_partition().clone(),
        p2.input_partition().clone(),
        p2.output_partition().clone(),
    )
    .unwrap()
}

#[test]
fn validate_p2_passes() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(
        dir.path(),
        "p2.json",
        &TriangularPlant::two_player_example(),
    );
    let out = dir.path().join("out");
    assert_eq!(tlqg(&["validate", s(&plant)], &out), 0);
    let report = read_json(out.join("validation.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 10);
}

#[test]
fn validate_names_unstabilizable_block() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(dir.path(), "bad.json", &unstabilizable_second_block());
    assert_eq!(tlqg(&["validate", s(&plant)], dir.path()), 2);
    let report = read_json(dir.path().join("validation.json"));
    let failures = report["failures"].as_array().unwrap();
    assert!(failures
        .iter()
        .any(|f| f["name"] == "stabilizable" && f["block"] == 2));
}

#[test]
fn synth_refuses_assumption_failures() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(dir.path(), "bad.json", &unstabilizable_second_block());
    assert_eq!(tlqg(&["synth", s(&plant)], dir.path()), 2);
    assert!(!dir.path().join("controller.json").exists());
}

#[test]
fn malformed_and_schema_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{\"A\": [[-1.0]], \"B\": ").unwrap();
    assert_eq!(tlqg(&["validate", s(&broken)], dir.path()), 3);

    let mut doc: Value =
        serde_json::from_str(&TriangularPlant::two_player_example().to_json()).unwrap();
    doc["A"][0][1] = Value::from(1.0);
    let upper = dir.path().join("upper.json");
    fs::write(&upper, doc.to_string()).unwrap();
    assert_eq!(tlqg(&["synth", s(&upper)], dir.path()), 3);

    let plant = write_plant(
        dir.path(),
        "p2.json",
        &TriangularPlant::two_player_example(),
    );
    assert_eq!(tlqg(&["synth", s(&plant), "--freq-n", "2"], dir.path()), 3);
}

#[test]
fn missing_input_exits_1() {
    let dir = TempDir::new().unwrap();
    let absent = dir.path().join("absent.json");
    assert_eq!(tlqg(&["validate", s(&absent)], dir.path()), 1);
}

#[test]
fn synth_p1_matches_scalar_lqg() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(dir.path(), "p1.json", &TriangularPlant::scalar_example());
    assert_eq!(tlqg(&["synth", s(&plant)], dir.path()), 0);
    let summary = read_json(dir.path().join("synthesis.json"));
    let j = summary["cost"]["j_opt"].as_f64().unwrap();
    assert!((j - 0.6966214).abs() < 1e-7, "J_opt = {j}");
    let controller = read_json(dir.path().join("controller.json"));
    let root = 2f64.sqrt() - 1.0;
    let a_k = controller["A_K"][0][0].as_f64().unwrap();
    let b_k = controller["B_K"][0][0].as_f64().unwrap();
    let c_k = controller["C_K"][0][0].as_f64().unwrap();
    assert!((a_k - (-1.0 - 2.0 * root)).abs() < 1e-10);
    assert!((b_k - root).abs() < 1e-10);
    assert!((c_k + root).abs() < 1e-10);
}

#[test]
fn synth_p2_reports_small_residuals() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(
        dir.path(),
        "p2.json",
        &TriangularPlant::two_player_example(),
    );
    assert_eq!(tlqg(&["synth", s(&plant)], dir.path()), 0);
    let summary = read_json(dir.path().join("synthesis.json"));
    assert_eq!(summary["status"], "ok");
    let entries = summary["residuals"]["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    for e in entries {
        assert!(e["norm"].as_f64().unwrap() < 1e-8, "{e}");
    }
    let cost = &summary["cost"];
    let (j, jc, jd) = (
        cost["j_opt"].as_f64().unwrap(),
        cost["j_cnt"].as_f64().unwrap(),
        cost["j_dcnt"].as_f64().unwrap(),
    );
    assert!((j * j - jc * jc - jd * jd).abs() < 1e-9 * j * j);
}

#[test]
fn certify_p2_full_passes() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(
        dir.path(),
        "p2.json",
        &TriangularPlant::two_player_example(),
    );
    assert_eq!(
        tlqg(&["certify", s(&plant), "--level", "full"], dir.path()),
        0
    );
    let cert = read_json(dir.path().join("certificate.json"));
    assert_eq!(cert["level"], "full");
    let checks = cert["checks"].as_array().unwrap();
    for i in 1..=2 {
        let name = format!("projection_zero[{i}]");
        let c = checks.iter().find(|c| c["name"] == name.as_str()).unwrap();
        assert!(c["value"].as_f64().unwrap() < 1e-8);
    }
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert_eq!(cert["perturbation"]["trials"], 200);
}

#[test]
fn certify_rejects_corrupted_controller() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(
        dir.path(),
        "p2.json",
        &TriangularPlant::two_player_example(),
    );
    assert_eq!(tlqg(&["synth", s(&plant)], dir.path()), 0);
    let mut controller = read_json(dir.path().join("controller.json"));
    let entry = controller["C_K"][1][2].as_f64().unwrap();
    controller["C_K"][1][2] = Value::from(entry + 0.1);
    let corrupted = dir.path().join("corrupted.json");
    fs::write(&corrupted, controller.to_string()).unwrap();
    let out = dir.path().join("cert");
    let code = tlqg(&["certify", s(&plant), "--controller", s(&corrupted)], &out);
    assert_eq!(code, 6);
    let cert = read_json(out.join("certificate.json"));
    let failed: Vec<&str> = cert["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed
        .iter()
        .any(|n| n.starts_with("projection_zero") || n.starts_with("perturbation")));
}

#[test]
fn certify_level_none_is_empty() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(dir.path(), "p1.json", &TriangularPlant::scalar_example());
    assert_eq!(
        tlqg(&["certify", s(&plant), "--level", "none"], dir.path()),
        0
    );
    let cert = read_json(dir.path().join("certificate.json"));
    assert!(cert["checks"].as_array().unwrap().is_empty());
    assert!(cert.get("perturbation").is_none());
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(
        dir.path(),
        "p2.json",
        &TriangularPlant::two_player_example(),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(tlqg(&["certify", s(&plant), "--seed", "11"], out), 0);
    }
    let synth_a = dir.path().join("sa");
    let synth_b = dir.path().join("sb");
    for out in [&synth_a, &synth_b] {
        assert_eq!(tlqg(&["synth", s(&plant)], out), 0);
    }
    for name in ["controller.json", "synthesis.json"] {
        assert_eq!(
            fs::read(synth_a.join(name)).unwrap(),
            fs::read(synth_b.join(name)).unwrap()
        );
    }
    assert_eq!(
        fs::read(a.join("certificate.json")).unwrap(),
        fs::read(b.join("certificate.json")).unwrap()
    );
}

#[test]
fn solver_failure_leaves_no_controller() {
    let dir = TempDir::new().unwrap();
    let plant = write_plant(
        dir.path(),
        "p2.json",
        &TriangularPlant::two_player_example(),
    );
    assert_eq!(tlqg(&["synth", s(&plant), "--lin-tol", "1"], dir.path()), 4);
    assert!(!dir.path().join("controller.json").exists());
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}
