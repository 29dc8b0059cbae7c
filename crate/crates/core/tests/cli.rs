//! End-to-end smoke tests of the `sgk` binary.

use std::fs;
use std::process::Command;

fn sgk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgk"))
}

#[test]
fn gasket_dump_writes_site_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g2.csv");
    let status = sgk()
        .args(["gasket", "dump", "--level", "2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().count() > 15, "expected sites and edges in the dump");
}

#[test]
fn rates_phi_tabulates_grid() {
    let output = sgk()
        .args(["rates", "phi", "--family", "dfl", "--gamma", "0.4", "--grid", "11"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert_eq!(text.lines().count(), 12, "header plus 11 grid rows");
    assert!(text.starts_with("rho,phi"));
}

#[test]
fn solve_writes_trajectory_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sol.csv");
    let status = sgk()
        .args([
            "solve", "--level", "2", "--bc", "dirichlet", "--rhoB", "0.8,0.2,0.5",
            "--family", "dfl", "--gamma", "0.4", "--rho0", "const:0.3", "--t", "0.05",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("t,site_id,rho"));
}

#[test]
fn simulate_writes_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let status = sgk()
        .args([
            "simulate", "--level", "2", "--b", "1.0", "--family", "dfl", "--gamma", "0.4",
            "--t", "0.05", "--replicas", "2", "--seed", "3", "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert!(value["events"].as_u64().unwrap() > 0);
    assert!(dir.path().join("pi_one.csv").exists());
    assert!(dir.path().join("boundary.csv").exists());
}

#[test]
fn experiment_run_check_flags_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("resist.json");
    fs::write(
        &cfg,
        r#"{"kind":"resistance_scaling","levels":[3],"word_depths":[1],
            "pairs":2,"boundary_depth":2,"seed":5}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let status = sgk()
        .args(["experiment", "run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .arg("--check")
        .status()
        .unwrap();
    assert!(status.success(), "resistance envelope experiment should pass");
    assert!(out_dir.join("manifest.json").exists());
}
