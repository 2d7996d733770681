use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn run(command: &str, config: &str, out: &Path) -> Output {
    let dir = out.parent().unwrap();
    let cfg = dir.join(format!("{command}.json"));
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_pc-extrap"))
        .args([command, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const WHITE: &str = r#"{
    "params": {"d": 1, "T": 1.0, "tau": 1, "K": 1, "J": 8},
    "a": {"kind": "blocks", "blocks": [[1.0], [0.5], [-0.25]]}
}"#;

#[test]
fn white_estimate_reports_the_unpredictable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run("estimate", WHITE, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(out.join("result.json"));
    // b_j = sum_{k >= j} a_k for d = tau = 1, so b = (1.25, 0.25, -0.25)
    let mse = r["estimate"]["mse"].as_f64().unwrap();
    assert!((mse - (1.5625 + 0.0625 + 0.0625)).abs() < 1e-10, "{mse}");
    let csv = std::fs::read_to_string(out.join("h_samples.csv")).unwrap();
    assert!(csv.starts_with("lambda,h0_re,h0_im\r\n"));
    assert_eq!(csv.lines().count(), 4096 + 1);
}

#[test]
fn validate_ma1_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{
        "params": {"d": 2, "T": 1.0, "tau": 1, "K": 1, "J": 32},
        "a": {"kind": "exponential", "rate": 1.5, "n_blocks": 4},
        "density": {"kind": "scalar-rational", "numerator": [1.0, 0.5], "target": "increment"},
        "mc": {"n_paths": 1000, "seed": 3, "window": 100}
    }"#;
    let o = run("validate", cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(out.join("result.json"));
    assert_eq!(r["passed"], Value::Bool(true));
    assert!(r["cross_validation"]["relative_difference"].as_f64().unwrap() < 1e-3);
}

#[test]
fn zero_tau_exits_with_the_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("estimate", &WHITE.replace("\"tau\": 1", "\"tau\": 0"), &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tau"), "{err}");
    assert!(!tmp.path().join("out").join("result.json").exists());
}

#[test]
fn finite_horizon_command_requires_n() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("saddle", WHITE, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("params.N"));
}

#[test]
fn saddle_golden_ratio_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    // a = (0, 1) with N = 1 gives b = (1, 1)
    let cfg = r#"{
        "params": {"d": 1, "T": 1.0, "tau": 1, "K": 1, "J": 4, "N": 1},
        "a": {"kind": "blocks", "blocks": [[0.0], [1.0]]}
    }"#;
    let o = run("saddle", cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let nu2 = json(out.join("result.json"))["saddle"]["nu_squared"].as_f64().unwrap();
    assert!((nu2 - (3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-10, "{nu2}");
}

#[test]
fn minimax_writes_the_least_favorable_density() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{
        "params": {"d": 1, "T": 1.0, "tau": 1, "K": 1, "J": 8},
        "a": {"kind": "blocks", "blocks": [[1.0], [0.4]]},
        "density": {"kind": "scalar-rational", "numerator": [1.0, 0.5], "target": "increment"},
        "nodes": 512,
        "class": {"family": "D0_2", "p": 1.0},
        "minimax": {"n_probes": 20, "negative_control": true}
    }"#;
    let o = run("minimax", cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(out.join("result.json"));
    let lf = &r["least_favorable"];
    for key in ["family", "f0_table", "multipliers", "equation_residual", "constraint_residual", "iterations", "converged"] {
        assert!(!lf[key].is_null(), "missing {key}");
    }
    assert_eq!(r["negative_control"]["passed"], Value::Bool(false));
    assert!(out.join("f0.csv").exists());
}

#[test]
fn manifest_hashes_match_the_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert!(run("estimate", WHITE, &out).status.success());
    let m = json(out.join("manifest.json"));
    assert_eq!(m["command"], "estimate");
    assert_eq!(m["config"]["params"]["J"], 8);
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), 3);
    for f in files {
        let bytes = std::fs::read(out.join(f["name"].as_str().unwrap())).unwrap();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()));
        h.update(&bytes);
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(f["sha256"].as_str().unwrap(), hex);
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
    // the echoed config reproduces the run
    let echo = tmp.path().join("echo.json");
    std::fs::write(&echo, serde_json::to_vec(&m["config"]).unwrap()).unwrap();
    let again = tmp.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_pc-extrap"))
        .args(["estimate", "--config"])
        .arg(&echo)
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("result.json")).unwrap(), std::fs::read(again.join("result.json")).unwrap());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("v.json");
    std::fs::write(
        &cfg,
        r#"{"params": {"d": 1, "T": 1.0, "tau": 1, "K": 1, "J": 8},
            "a": {"kind": "blocks", "blocks": [[1.0]]},
            "density": {"kind": "scalar-rational", "numerator": [1.0, 0.3], "target": "increment"},
            "mc": {"n_paths": 200, "window": 20}}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pc-extrap"))
        .args(["validate", "--seed", "9", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(o.status.code() != Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(tmp.path().join("o/result.json"))["seed"], 9);
}
