use std::path::Path;
use std::process::{Command, Output};

fn homog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homog")).args(args).env_remove("HOMOG_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn verify_with_no_suites_succeeds() {
    let o = homog(&["verify", "--none"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert!(v["tolerances"]["roundoff_floor"].is_number());
}

#[test]
fn unknown_suite_is_a_usage_error() {
    assert_eq!(code(&homog(&["verify", "--suite", "nope"])), 2);
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(code(&homog(&["frobnicate"])), 2);
    assert_eq!(code(&homog(&["partition", "--eps", "0.02", "--alpha", "0.5"])), 2);
    assert_eq!(code(&homog(&["net", "--eps", "0.02", "--model", "nowhere"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sede": 3}"#);
    assert_eq!(code(&homog(&["--config", &cfg, "verify", "--none"])), 2);
}

#[test]
fn thread_count_is_validated() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_homog"))
            .args(["verify", "--suite", "leray"])
            .env("HOMOG_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    assert_eq!(code(&run("0")), 2);
    assert_eq!(code(&run("many")), 2);
}

#[test]
fn net_json_carries_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("net");
    let o = homog(&["net", "--eps", "0.02", "--alignment", "hex", "-o", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("net.json")).unwrap()).unwrap();
    assert!(v["header"]["config_hash"].is_string());
    assert!(v["header"]["tolerances"]["final_gap_ratio"].is_number());
    let csv = std::fs::read_to_string(out.join("net.csv")).unwrap();
    assert!(csv.starts_with("j,x1,x2\n"));
}

#[test]
fn study_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"eps": [0.025, 0.02], "two_scale_cells": 0, "astar_lattice": 1}"#);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = homog(&["--config", &cfg, "study", "-o", out.to_str().unwrap()]);
        assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(std::fs::read(out.join("study.csv")).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("study.json")).unwrap()).unwrap();
        assert!(v["config_hash"].is_string() && v["tolerances"].is_object());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(String::from_utf8_lossy(&csvs[0]).lines().count(), 3);
}

#[test]
fn single_rung_study_misses_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"eps": [0.025], "two_scale_cells": 0, "astar_lattice": 1}"#);
    let o = homog(&["--config", &cfg, "study"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}
