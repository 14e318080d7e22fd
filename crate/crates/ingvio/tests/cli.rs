use std::path::Path;
use std::process::{Command, Output};

use ingvio::output::NumericTable;

fn ingvio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ingvio")).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn short_config(dir: &Path) -> String {
    let path = dir.join("short.toml");
    std::fs::write(&path, "schema_version = 1\n\n[scenario]\nduration = 6.0\n").unwrap();
    path.to_string_lossy().into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn simulate_run_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = short_config(d);
    assert!(ingvio(&["simulate", "--scenario", &cfg, "--out", &p(d, "ds")]).status.success());
    let out = ingvio(&["run", "--dataset", &p(d, "ds"), "--config", &cfg, "--out", &p(d, "run")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let est = NumericTable::read(&d.join("run/estimate.csv"), "estimate").unwrap();
    let images = ingvio::dataset::read_dataset(&d.join("ds")).unwrap().images.len();
    assert_eq!(est.rows.len(), images);
    let err = NumericTable::read(&d.join("run/errors.csv"), "errors").unwrap();
    assert!(err.column("position_error_m").unwrap().iter().all(|e| *e < 5.0));
    assert!(ingvio(&["plot", "--run", &p(d, "run"), "--out", &p(d, "run.svg")]).status.success());
    let svg = std::fs::read_to_string(d.join("run.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("Yaw error"));
}

#[test]
fn bad_config_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[scenario]\nduraton = 5.0\n").unwrap();
    let out = ingvio(&["simulate", "--scenario", &bad.to_string_lossy(), "--out", &p(tmp.path(), "x")]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = short_config(tmp.path());
    assert!(ingvio(&["simulate", "--scenario", &cfg, "--out", &p(tmp.path(), "ds")]).status.success());
    // monocular dataset, stereo requested
    let out = ingvio(&["run", "--dataset", &p(tmp.path(), "ds"), "--camera", "stereo", "--out", &p(tmp.path(), "r")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ingvio(&["run", "--dataset", &p(tmp.path(), "nope"), "--out", &p(tmp.path(), "r")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
