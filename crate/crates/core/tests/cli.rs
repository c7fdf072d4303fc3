//! End-to-end checks of the `kdial` binary: exit codes and file outputs.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn kdial(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdial"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn split(name: &str) -> Value {
    let f = |file: &str| json!(format!("data/{name}/{file}.json"));
    json!({
        "logs": f("logs"),
        "labels": f("labels"),
        "knowledge": f("knowledge"),
        "schema": f("schema"),
        "api_positives": f("api_positives"),
    })
}

/// A small config rooted at `dir`, with paths relative to the config file.
fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> std::path::PathBuf {
    let model = json!({"layers": 1, "heads": 2, "hidden": 16, "ffn_multiplier": 2, "max_len": 96,
                       "relative_buckets": 8, "dropout": 0.0});
    let mut generator = model.clone();
    generator["max_len"] = json!(160);
    let stage = json!({"epochs": 1, "batch_size": 8});
    let mut v = json!({
        "seed": 3,
        "train": split("train"),
        "eval": split("val"),
        "vocab": {"path": "vocab.json", "size": 200},
        "checkpoint_dir": "checkpoints",
        "output_dir": "out",
        "entry": 1,
        "train_if_missing": true,
        "prefilter": false,
        "models": {"detector": model, "selector": model, "generator": generator},
        "training": {"detector": stage, "selector": stage, "generator": stage, "negatives": "multi_scale"},
        "ensemble": {"members": [{"seed_offset": 1}, {"seed_offset": 2}, {"seed_offset": 3}]},
        "synth": {"dir": "data", "dialogues": 40},
    });
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn synth(config: &Path) {
    let out = kdial(config, &["synth", "--sizes", "2x3x4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_ingest_validates() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    synth(&config);
    let out = kdial(&config, &["ingest", "--validate"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["train"].is_object() && summary["eval"].is_object());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        synth(&write_config(dir.path(), |_| {}));
    }
    for file in ["train/logs.json", "train/labels.json", "val/knowledge.json", "unseen/schema.json"] {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("data").join(file)).unwrap();
        assert_eq!(read(&a), read(&b), "{file}");
    }
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |v| v["surprise"] = json!(true));
    assert_eq!(kdial(&config, &["ingest"]).status.code(), Some(2));

    let config = write_config(dir.path(), |v| v["models"]["selector"]["heads"] = json!(3));
    assert_eq!(kdial(&config, &["ingest"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    let out = kdial(&config, &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("logs.json"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |v| v["train_if_missing"] = json!(false));
    synth(&config);
    assert!(kdial(&config, &["tokenizer-train"]).status.success());
    let out = kdial(&config, &["run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}

#[test]
fn gold_labels_as_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    synth(&config);
    let gold = dir.path().join("data/val/labels.json");
    for task in ["1", "2", "3"] {
        let out = kdial(&config, &["evaluate", "--task", task, "--predictions", gold.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        let key = ["f1", "recall@1", "bleu4"][task.parse::<usize>().unwrap() - 1];
        assert!(report["count"].as_u64().unwrap() > 0, "task {task}: {report}");
        assert_eq!(report["metrics"][key], json!(1.0), "task {task}: {report}");
    }
}
