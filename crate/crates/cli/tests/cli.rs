use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cbm_align::concept_model::{init_model, save_model};
use cbm_align::corpus::load_bundle;
use serde_json::{json, Value};

fn run(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cbm-align"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).output().unwrap()
}

fn config(dir: &Path, v: Value) -> std::path::PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
    p
}

fn read(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn synth_into(dir: &Path, synth: Value) {
    let cfg = config(dir, json!({ "synth": synth }));
    let o = run(&["synth"], Some(&cfg), &dir.join("s"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let o = Command::new(env!("CARGO_BIN_EXE_cbm-align"))
            .arg(flag)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{flag}");
        assert!(!o.stdout.is_empty());
    }
    assert!(!dir.path().join("error.json").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fit"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
}

#[test]
fn runtime_failure_writes_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({ "bundle": "missing" }));
    let out = dir.path().join("out");
    let o = run(&["train"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(1));
    let stderr: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(stderr, read(&out.join("error.json")));
    assert_eq!(stderr["error"]["kind"], "invalid_config");
    assert!(!out.join("run_manifest.json").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({ "train": { "epoch": 5 } }));
    let o = run(&["synth"], Some(&cfg), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn successful_run_clears_stale_error_and_lists_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("error.json"), "{}").unwrap();
    synth_into(dir.path(), json!({}));
    assert!(!out.join("error.json").exists());
    let manifest = read(&out.join("run_manifest.json"));
    assert_eq!(manifest["subcommand"], "synth");
    assert_eq!(manifest["seed"], 0);
    let listed: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    for name in [
        "bundle",
        "truth.json",
        "candidates",
        "synth_summary.json",
        "timing.json",
        "run_manifest.json",
    ] {
        assert!(listed.contains(&name), "{name} not listed in {listed:?}");
    }
    load_bundle(out.join("bundle")).unwrap();
}

#[test]
fn eval_with_zero_projection_matches_raw_baseline() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), json!({}));
    let bundle = load_bundle(dir.path().join("s/bundle")).unwrap();
    let model = init_model(bundle.d_patch(), bundle.n_concepts(), bundle.n_classes(), 4).unwrap();
    assert_eq!(model.w_cp.max_abs(), 0.0);
    save_model(&model, dir.path().join("m")).unwrap();
    let cfg = config(
        dir.path(),
        json!({ "bundle": "s/bundle", "model": "m", "eval": { "include_reference": false } }),
    );
    let o = run(&["eval"], Some(&cfg), &dir.path().join("e"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read(&dir.path().join("e/eval_report.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["class_accuracy"], rows[1]["class_accuracy"]);
    assert_eq!(rows[0]["concept_accuracy"], rows[1]["concept_accuracy"]);
    assert_eq!(
        read(&dir.path().join("e/eval_summary.json"))["w_cp_is_zero"],
        true
    );
}

#[test]
fn score_writes_top_k_rows_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), json!({ "k": 3, "samples_per_class": 4 }));
    let cfg = config(
        dir.path(),
        json!({ "bundle": "s/bundle", "score": { "top_k": 5 } }),
    );
    let o = run(&["score"], Some(&cfg), &dir.path().join("sc"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sc/top_k.csv")).unwrap();
    // header plus 12 samples x 5 ranks, raw scores only
    assert_eq!(csv.lines().count(), 1 + 12 * 5);
    let raw = fs::read(dir.path().join("sc/scores_raw.f32")).unwrap();
    assert_eq!(raw.len(), 12 * 12 * 4);
    assert!(!dir.path().join("sc/scores_enhanced.f32").exists());
}

#[test]
fn sweep_csv_has_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        json!({ "train": { "epochs": 20 }, "sweep": { "grid": [0, 5, 10], "seeds": [0, 1] } }),
    );
    let o = run(&["sweep"], Some(&cfg), &dir.path().join("sw"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(
        lines[1].starts_with("0,2,")
            && lines[2].starts_with("5,2,")
            && lines[3].starts_with("10,2,")
    );
    assert!(dir
        .path()
        .join("sw/runs/labels_10/seed_1/train_report.json")
        .exists());
}

#[test]
fn sweep_budget_beyond_train_split_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        json!({ "train": { "epochs": 1 }, "sweep": { "grid": [11], "seeds": [0] } }),
    );
    let o = run(&["sweep"], Some(&cfg), &dir.path().join("sw"));
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(
        read(&dir.path().join("sw/error.json"))["error"]["kind"],
        "budget_infeasible"
    );
}

#[test]
fn analyze_reports_no_confusions_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), json!({ "noise_sigma": 0.0, "alignment": 1.0 }));
    let cfg = config(
        dir.path(),
        json!({ "bundle": "s/bundle", "model": "t/model", "train": { "epochs": 200, "adam": { "lr": 1e-2 } } }),
    );
    assert!(run(&["train"], Some(&cfg), &dir.path().join("t"))
        .status
        .success());
    let o = run(&["analyze"], Some(&cfg), &dir.path().join("a"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c = read(&dir.path().join("a/confounding.json"));
    assert_eq!(c["no_confusions"], true);
    assert_eq!(c["selected"], json!([]));
    assert_eq!(c["accuracy"], 100.0);
}
