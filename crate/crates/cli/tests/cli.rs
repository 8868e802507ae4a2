//! Drives the `anacil` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn anacil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anacil"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn json_ok(out: Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn synth(dir: &Path) {
    fs::write(
        dir.join("spec.json"),
        r#"{"class_count": 8, "classes_per_task": 2, "adapter_dim": 12, "clip_dim": 6,
            "rank": 3, "train_per_class": 6, "test_per_class": 3, "seed": 5}"#,
    )
    .unwrap();
    let v = json_ok(anacil(
        &["synth", "--spec", "spec.json", "--out", "data"],
        dir,
    ));
    assert_eq!(v["train_records"], 48);
    assert_eq!(v["tasks"], 4);
}

#[test]
fn synth_then_inspect_every_format() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let v = json_ok(anacil(&["inspect", "data/train.bin"], dir.path()));
    assert_eq!(v["kind"], "dataset");
    assert_eq!(v["header"]["record_count"], 48);
    assert_eq!(v["header"]["adapter_dim"], 12);
    assert_eq!(v["header"]["clip_dim"], 6);
    assert_eq!(v["header"]["class_count"], 8);
    assert_eq!(v["branches"]["clip"]["dim"], 6);
    assert_eq!(v["records_per_class"].as_array().unwrap().len(), 8);

    let v = json_ok(anacil(&["inspect", "data/bank.bin"], dir.path()));
    assert_eq!(v["kind"], "prototype_bank");
    assert_eq!(v["class_count"], 8);
    assert_eq!(v["class_names"].as_array().unwrap().len(), 8);
}

#[test]
fn lambda_search_emits_full_table() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let v = json_ok(anacil(
        &[
            "lambda-search",
            "--data",
            "data/train.bin",
            "--grid",
            "1e-8..1e0",
            "--buffer-dim",
            "128",
        ],
        dir.path(),
    ));
    let table = v["table"].as_array().unwrap();
    assert_eq!(table.len(), 9);
    let lambdas: Vec<f64> = table
        .iter()
        .map(|r| r["lambda"].as_f64().unwrap())
        .collect();
    assert_eq!(lambdas[0], 1e-8);
    assert_eq!(lambdas[8], 1.0);
    assert!(lambdas.contains(&v["selected"].as_f64().unwrap()));
    assert!(table
        .iter()
        .all(|r| (0.0..=1.0).contains(&r["accuracy"].as_f64().unwrap())));
}

#[test]
fn run_writes_reports_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(
        dir.path().join("run.cfg"),
        "train = data/train.bin\ntest = data/test.bin\nbank = data/bank.bin\n\
         tasks = 4\nseeds = 1993\nbuffer.dim = 128\noutput = out\n",
    )
    .unwrap();
    let v = json_ok(anacil(&["run", "--config", "run.cfg"], dir.path()));
    assert_eq!(v["summary"]["seeds"][0], 1993);
    let seed_dir = dir.path().join("out/seed-1993");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(seed_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 4);
    assert!(seed_dir.join("stages.csv").exists());
    let snap = json_ok(anacil(
        &["inspect", "out/seed-1993/checkpoint/state.rls"],
        dir.path(),
    ));
    assert_eq!(snap["kind"], "rls_snapshot");
    assert_eq!(snap["buffer_dim"], 128);
    assert_eq!(snap["class_count"], 8);
}

#[test]
fn rigidity_writes_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let v = json_ok(anacil(
        &[
            "rigidity",
            "--angles",
            "0,30,60,90",
            "--trials",
            "4",
            "--out",
            "sweep.csv",
        ],
        dir.path(),
    ));
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("angle_deg,"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk.bin"), b"NOTMAGIC1234").unwrap();
    let out = anacil(&["inspect", "junk.bin"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unrecognized magic"));
    let out = anacil(&["run", "--config", "missing.cfg"], dir.path());
    assert!(!out.status.success());
}
