use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn dermvit(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dermvit"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DERMVIT_CONFIG")
        .env_remove("DERMVIT_SEED")
        .env_remove("DERMVIT_OUT_DIR")
        .args(["--threads", "1"])
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path) {
    let cfg = json!({
        "model": {
            "image_height": 32, "image_width": 32, "patch_size": 8,
            "embed_dim": 16, "backbone_layers": 1, "head_layers": 1, "num_heads": 2,
            "mlp_ratio": 2.0, "select_k": 3,
            "num_diseases": 3, "num_body_parts": 4, "num_attributes": 5,
            "fusion_dim": 16, "enabled_heads": ["disease", "body_part", "attribute"],
            "lsm_enabled": true, "fusion_mode": "cim"
        },
        "train": { "epochs": 2, "batch_size": 4 }
    });
    fs::write(dir.join("tiny.json"), cfg.to_string()).unwrap();
}

#[test]
fn synth_train_eval_infer_attend() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_config(d);
    let cfg = ["--config", "tiny.json"];

    ok(&dermvit(
        d,
        &[&cfg[..], &["synth", "--out", "data", "--count", "12"]].concat(),
    ));
    let report: Value = serde_json::from_str(&ok(&dermvit(
        d,
        &["validate-data", "--manifest", "data/manifest.jsonl", "--decode"],
    )))
    .unwrap();
    assert_eq!(report["records"], 12);

    let train = |out: &str| {
        let s = ok(&dermvit(
            d,
            &[
                &cfg[..],
                &["--out-dir", out, "train", "--manifest", "data/manifest.jsonl"],
            ]
            .concat(),
        ));
        serde_json::from_str::<Value>(s.lines().last().unwrap()).unwrap()
    };
    let a = train("run_a");
    let b = train("run_b");
    assert_eq!(a["epochs"], 2);
    assert_eq!(a["sha256"], b["sha256"]);
    assert_eq!(
        fs::read_to_string(d.join("run_a/train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let metrics: Value = serde_json::from_str(&ok(&dermvit(
        d,
        &[
            "--out-dir",
            "run_a",
            "eval",
            "--checkpoint",
            "run_a/last",
            "--manifest",
            "data/manifest.jsonl",
        ],
    )))
    .unwrap();
    assert_eq!(metrics["samples"], 12);
    assert!(d.join("run_a/metrics.json").exists());

    let diag: Value = serde_json::from_str(&ok(&dermvit(
        d,
        &[
            "infer",
            "--checkpoint",
            "run_a/best",
            "--image",
            "data/images/0000.png",
            "--vocab",
            "data/vocab.json",
        ],
    )))
    .unwrap();
    let diff = diag["differential"].as_array().unwrap();
    assert_eq!(diff.len(), 3);
    assert!(diff[0]["name"].is_string());
    assert_eq!(diag["selected_tokens"]["disease"].as_array().unwrap().len(), 3);

    ok(&dermvit(
        d,
        &[
            "attend",
            "--checkpoint",
            "run_a/last",
            "--image",
            "data/images/0001.png",
            "--layer",
            "0",
            "--out",
            "heat.png",
            "--csv",
            "heat.csv",
        ],
    ));
    assert!(d.join("heat.png").exists());
    assert_eq!(fs::read_to_string(d.join("heat.csv")).unwrap().lines().count(), 4);
    let bad = dermvit(
        d,
        &[
            "attend",
            "--checkpoint",
            "run_a/last",
            "--image",
            "data/images/0001.png",
            "--layer",
            "9",
        ],
    );
    assert!(!bad.status.success());
}

#[test]
fn crossval_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_config(d);
    ok(&dermvit(
        d,
        &["--config", "tiny.json", "synth", "--out", "data", "--count", "9"],
    ));
    let out = ok(&dermvit(
        d,
        &[
            "--config",
            "tiny.json",
            "--out-dir",
            "cv",
            "crossval",
            "--manifest",
            "data/manifest.jsonl",
            "--folds",
            "3",
        ],
    ));
    assert!(out.contains("disease.f1"));
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("cv/crossval.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
}

#[test]
fn validate_data_reports_bad_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_config(d);
    ok(&dermvit(
        d,
        &["--config", "tiny.json", "synth", "--out", "data", "--count", "3"],
    ));
    let mut manifest = fs::read_to_string(d.join("data/manifest.jsonl")).unwrap();
    manifest
        .push_str("{\"image_path\":\"images/0000.png\",\"disease_id\":7,\"body_part_ids\":[0],\"attribute_ids\":[]}\n");
    manifest.push_str(
        "{\"image_path\":\"images/0001.png\",\"disease_id\":1,\"body_part_ids\":[0],\"attribute_ids\":[1]}\n",
    );
    fs::write(d.join("data/manifest.jsonl"), manifest).unwrap();
    let out = dermvit(d, &["validate-data", "--manifest", "data/manifest.jsonl"]);
    assert!(!out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let kinds: Vec<&str> = report["issues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["kind"].as_str().unwrap())
        .collect();
    assert!(kinds.contains(&"unknown_id"), "{kinds:?}");
    assert!(kinds.contains(&"duplicate_path"), "{kinds:?}");
}

#[test]
fn config_env_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let desk: Value = serde_json::from_str(&ok(&dermvit(d, &["config"]))).unwrap();
    assert_eq!(desk["model"]["image_height"], 64);
    assert_eq!(desk["train"]["sgd"]["lr"], 0.003);

    tiny_config(d);
    let out = Command::new(env!("CARGO_BIN_EXE_dermvit"))
        .current_dir(d)
        .env("DERMVIT_CONFIG", "tiny.json")
        .arg("config")
        .output()
        .unwrap();
    let tiny: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(tiny["model"]["image_height"], 32);

    let missing = dermvit(d, &["--config", "nope.json", "config"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
}
