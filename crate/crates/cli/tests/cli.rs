use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qssm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qssm")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, "act_bits = 6\n[recon]\niterations = 10\neval_every = 5\n").unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_then_quantize_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg = config(dir.path());
    let trained = stdout_json(&qssm(&["train-toy", "--config", &cfg, "--seed", "0", "--out", &d("train")]));
    assert!(trained["val_accuracy"].as_f64().unwrap() >= 0.95);
    let model = d("train/model");

    let q = stdout_json(&qssm(&["reconstruct", "--config", &cfg, "--seed", "0", "--model", &model, "--out", &d("q")]));
    let stages: Vec<&str> = q["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["calibrate", "route", "init", "reconstruct", "eval"]);
    let again = stdout_json(&qssm(&["reconstruct", "--config", &cfg, "--seed", "0", "--model", &model, "--out", &d("q2")]));
    assert_eq!(q["stages"], again["stages"]);
    assert_eq!(read_json(&dir.path().join("q/quant.json")), read_json(&dir.path().join("q2/quant.json")));

    let quant = d("q/quant.json");
    let e = stdout_json(&qssm(&["eval", "--config", &cfg, "--model", &model, "--quant", &quant, "--out", &d("e")]));
    assert_eq!(e["accuracy"], q["accuracy"]);
    let fp = stdout_json(&qssm(&["eval", "--config", &cfg, "--model", &model, "--out", &d("fp")]));
    assert_eq!(fp["accuracy"], fp["fp_accuracy"]);

    let c = stdout_json(&qssm(&["calibrate", "--config", &cfg, "--model", &model, "--out", &d("c")]));
    assert_eq!(c["samples"], 256);
    let calib = read_json(&dir.path().join("c/calibration.json"));
    assert!(calib["blocks"][0]["ssm.abar"]["median"].as_f64().unwrap() < 1.0);

    let a = stdout_json(&qssm(&["analyze", "--config", &cfg, "--model", &model, "--out", &d("a")]));
    assert_eq!(a["files"].as_array().unwrap().len(), 5);
    let steps = std::fs::read_to_string(dir.path().join("a/h_steps.csv")).unwrap();
    assert!(steps.starts_with("block,t,min,q1,median,q3,max\n"));
}

#[test]
fn sweep_reads_points_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let points = dir.path().join("points.toml");
    std::fs::write(&points, "[[points]]\nlabel = \"a0\"\nalpha = 0.0\n\n[[points]]\nlabel = \"a1\"\nalpha = 1.0\n").unwrap();
    let out = dir.path().join("s");
    let r = stdout_json(&qssm(&[
        "sweep",
        "--config",
        &cfg,
        "--points",
        points.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(r["points"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "label,seed,fp_accuracy,init_accuracy,accuracy,ltsq_blocks");
    assert!(rows[1].starts_with("a0,") && rows[1].ends_with(",1"));
    assert!(rows[2].starts_with("a1,") && rows[2].ends_with(",0"));
}

#[test]
fn estimate_reports_reductions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("w6a6.json");
    std::fs::write(&cfg, r#"{"weight_bits": 6, "act_bits": 6}"#).unwrap();
    let out = dir.path().join("est");
    let r = stdout_json(&qssm(&["estimate", "--vim-b", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let storage = r["storage_reduction"].as_f64().unwrap();
    assert!((0.75..=0.82).contains(&storage), "{storage}");
    assert!(r["bops_reduction"].as_f64().unwrap() >= 0.75);
    assert!(read_json(&out.join("estimate.json"))["ops"].as_array().unwrap().len() > 24);
}

#[test]
fn failures_print_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "alpha = 2.0\n").unwrap();
    for (args, code) in [
        (vec!["estimate", "--config", bad.to_str().unwrap()], "invalid_config"),
        (vec!["estimate", "--config", "/does/not/exist.toml"], "io"),
        (vec!["frobnicate"], "usage"),
    ] {
        let out = qssm(&args);
        assert!(!out.status.success());
        let err: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(err["code"], code, "{err}");
        assert!(err["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}
