use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {"classes": 6, "semantic_dim": 8, "dim_a": 6, "dim_b": 7, "train_per_class": 6, "test_per_class": 2, "seed": 3},
  "train": {"epochs": 2, "batch_size": 8, "modules": 2, "architectures": [[], [4]], "seed": 5},
  "eval": {"k_values": [1, 3], "uncertainty_samples": 4}
}"#;

fn mmhcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmhcl"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn run_dir(o: &Output) -> PathBuf {
    PathBuf::from(stdout_json(o)["run_dir"].as_str().expect("run_dir"))
}

fn setup() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("runs");
    (
        dir,
        cfg.to_string_lossy().into_owned(),
        out.to_string_lossy().into_owned(),
    )
}

fn dataset_of(gen: &Path) -> String {
    format!("paths.dataset=\"{}\"", gen.join("dataset.json").display())
}

#[test]
fn gen_train_eval_pipeline() {
    let (_dir, cfg, out) = setup();
    let gen = mmhcl(&["gen-data", "--config", &cfg, "--out", &out]);
    assert_eq!(gen.status.code(), Some(0), "{}", String::from_utf8_lossy(&gen.stderr));
    let gen_dir = run_dir(&gen);
    for f in [
        "train_a.csv",
        "train_b.csv",
        "test_a.csv",
        "test_b.csv",
        "catalog.csv",
        "dataset.json",
        "manifest.json",
    ] {
        assert!(gen_dir.join(f).is_file(), "{f}");
    }

    let ds = dataset_of(&gen_dir);
    let tr = mmhcl(&["train", "--config", &cfg, "--out", &out, "--set", &ds]);
    assert_eq!(tr.status.code(), Some(0), "{}", String::from_utf8_lossy(&tr.stderr));
    let ckpt = format!("paths.checkpoint=\"{}\"", run_dir(&tr).join("model.ckpt").display());

    let ev = mmhcl(&["eval", "--config", &cfg, "--out", &out, "--set", &ds, "--set", &ckpt]);
    assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
    let ev_dir = run_dir(&ev);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(ev_dir.join("metrics.json")).unwrap()).unwrap();
    let names: Vec<&str> = metrics
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["B+O+D+C", "average", "confidence-max"]);
    assert!(fs::read_to_string(ev_dir.join("metrics.txt"))
        .unwrap()
        .contains("acc_mix"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(ev_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 7);
}

#[test]
fn reruns_are_identical() {
    let (_dir, cfg, out) = setup();
    let a = run_dir(&mmhcl(&["eval", "--config", &cfg, "--out", &out]));
    let b = run_dir(&mmhcl(&["eval", "--config", &cfg, "--out", &out, "--sequential"]));
    assert_ne!(a, b);
    for f in [
        "manifest.json",
        "metrics.json",
        "model.ckpt",
        "predictions.csv",
        "loss.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn check_failure_exits_three() {
    let (_dir, cfg, out) = setup();
    let strict = mmhcl(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        &out,
        "--check",
        "--set",
        "eval.checks.A_u=100",
        "--set",
        "eval.checks.B_u=100",
        "--set",
        "eval.baselines=false",
    ]);
    let report = stdout_json(&strict);
    let all_passed = report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true);
    assert_eq!(strict.status.code(), Some(if all_passed { 0 } else { 3 }));

    let lax = mmhcl(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        &out,
        "--check",
        "--set",
        "eval.checks.acc_mix=0",
        "--set",
        "eval.baselines=false",
    ]);
    assert_eq!(lax.status.code(), Some(0));
    assert_eq!(stdout_json(&lax)["checks"][0]["passed"], true);
}

#[test]
fn config_errors_exit_one_with_report() {
    let (dir, cfg, out) = setup();
    for args in [
        vec![
            "train",
            "--config",
            cfg.as_str(),
            "--out",
            out.as_str(),
            "--set",
            "train.modules=1",
        ],
        vec![
            "train",
            "--config",
            cfg.as_str(),
            "--out",
            out.as_str(),
            "--set",
            "train.epoch=3",
        ],
        vec!["train", "--config", "/nonexistent/run.json", "--out", out.as_str()],
        vec![
            "eval",
            "--config",
            cfg.as_str(),
            "--out",
            out.as_str(),
            "--set",
            "paths.checkpoint=\"/nonexistent.ckpt\"",
        ],
    ] {
        let o = mmhcl(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let report = stdout_json(&o);
        assert_eq!(report["kind"], "config");
        assert!(!report["message"].as_str().unwrap().is_empty());
    }
    assert!(!dir.path().join("runs").exists());
    assert_eq!(mmhcl(&["fit"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let (dir, cfg, out) = setup();
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"garbage").unwrap();
    let set = format!("paths.checkpoint=\"{}\"", junk.display());
    let o = mmhcl(&["sweep-k", "--config", &cfg, "--out", &out, "--set", &set]);
    assert_eq!(o.status.code(), Some(2));
    let report = stdout_json(&o);
    assert_eq!(report["kind"], "runtime");
    let manifest: Value = serde_json::from_str(
        &fs::read_to_string(Path::new(report["run_dir"].as_str().unwrap()).join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["status"], "failed");
}

#[test]
fn remaining_commands_write_their_outputs() {
    let (_dir, cfg, out) = setup();
    for (cmd, file) in [
        ("ablate", "ablation.json"),
        ("sweep-k", "sweep.csv"),
        ("dump-uncertainty", "uncertainty.csv"),
    ] {
        let o = mmhcl(&[cmd, "--config", &cfg, "--out", &out]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(run_dir(&o).join(file).is_file(), "{cmd}");
    }
}
