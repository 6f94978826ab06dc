use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use caw_core::model::load_checkpoint;
use serde_json::{json, Value};

const SMALL: &str = r#"{
  "model": { "arch": { "kind": "mlp", "input_dim": 10, "hidden_dim": 12, "hidden_layers": 1, "embed_dim": 6 }, "temperature": 0.2 },
  "data": {
    "train": { "source": "synthetic", "classes": 4, "input_dim": 10, "embed_dim": 6, "samples_per_class": 20 },
    "eval": { "source": "synthetic", "classes": 4, "input_dim": 10, "embed_dim": 6, "samples_per_class": 10, "seed": 1 }
  },
  "pretrain": { "epochs": 5, "learning_rate": 0.05, "batch_size": 16 },
  "train": { "epochs": 2, "batch_size": 16, "learning_rate": 0.01 },
  "eval": { "attacks": [ { "kind": "pgd", "epsilon": 0.05, "steps": 3 } ], "batch_size": 32 },
  "attack": { "kind": "pgd", "epsilon": 0.05, "steps": 3 },
  "gradcheck": { "states": 5 }
}"#;

fn caw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caw")).args(args).output().expect("binary runs")
}

fn setup(config: &str) -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    let (c, o) = (cfg.to_str().unwrap().to_owned(), out.to_str().unwrap().to_owned());
    (dir, c, o)
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn train(cfg: &str, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--config", cfg, "--out", out];
    args.extend_from_slice(extra);
    let o = caw(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_every_artifact() {
    let (_d, cfg, out) = setup(SMALL);
    train(&cfg, &out, &[]);
    for f in ["config.json", "checkpoint.cawm", "pretrain_log.jsonl", "train_log.jsonl", "timings.jsonl", "summary.json"] {
        assert!(Path::new(&out).join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(Path::new(&out).join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 80usize.div_ceil(16));
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "ce", "ca", "reg", "total", "mean_weight", "attack_success_rate"] {
        assert!(first.get(key).is_some(), "log record lacks {key}: {first}");
    }
    let summary = read_json(Path::new(&out).join("summary.json"));
    assert_eq!(summary["steps"], 10);
}

#[test]
fn zero_epochs_leave_the_reference_untouched() {
    let (_d, cfg, out) = setup(SMALL);
    train(&cfg, &out, &["--epochs", "0"]);
    let ckpt = load_checkpoint(&Path::new(&out).join("checkpoint.cawm")).unwrap();
    assert_eq!(ckpt.model.tuned(), ckpt.model.frozen());
    assert_eq!(ckpt.epoch, 0);
    assert_eq!(fs::read_to_string(Path::new(&out).join("train_log.jsonl")).unwrap(), "");
}

#[test]
fn malformed_config_names_the_key() {
    let (_d, cfg, out) = setup(r#"{ "train": { "learnin_rate": 0.1 } }"#);
    let o = caw(&["train", "--config", &cfg, "--out", &out, "--json"]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("learnin_rate") && stderr.contains("train"), "{stderr}");
    let err: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(err["error"]["exit_code"], 2);
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn invalid_values_and_missing_files_map_to_exit_codes() {
    let (_d, cfg, out) = setup(r#"{ "train": { "momentum": 1.5 } }"#);
    assert_eq!(caw(&["train", "--config", &cfg, "--out", &out]).status.code(), Some(2));
    let (_d2, cfg2, out2) = setup(SMALL);
    let o = caw(&["eval", "--config", &cfg2, "--out", &out2]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(caw(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_budget_attack_succeeds_exactly_on_clean_errors() {
    let (_d, cfg, out) = setup(SMALL);
    train(&cfg, &out, &[]);
    let o = caw(&["attack", "--config", &cfg, "--out", &out, "--eps", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(Path::new(&out).join("attack.jsonl")).unwrap());
    let rows: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 40);
    for r in &rows {
        assert_eq!(r["success"], json!(r["clean_pred"] != r["label"]));
        assert_eq!(r["adv_pred"], r["clean_pred"]);
        assert_eq!(r["linf"], 0.0);
    }
}

#[test]
fn attack_respects_the_budget() {
    let (_d, cfg, out) = setup(SMALL);
    train(&cfg, &out, &[]);
    let o = caw(&["attack", "--config", &cfg, "--out", &out, "--attack", "fgsm", "--eps", "0.03"]);
    assert_eq!(o.status.code(), Some(0));
    for line in String::from_utf8(o.stdout).unwrap().lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert!(r["linf"].as_f64().unwrap() <= 0.03 + 1e-12);
    }
    let summary = read_json(Path::new(&out).join("attack_summary.json"));
    assert_eq!(summary["attack"]["kind"], "fgsm");
}

#[test]
fn eval_without_attacks_reports_clean_accuracy_only() {
    let mut cfg: Value = serde_json::from_str(SMALL).unwrap();
    cfg["eval"]["attacks"] = json!([]);
    let (_d, cfg, out) = setup(&cfg.to_string());
    train(&cfg, &out, &[]);
    let o = caw(&["eval", "--config", &cfg, "--out", &out, "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["report"]["robust"], json!([]));
    let acc = doc["report"]["clean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(read_json(Path::new(&out).join("eval_report.json")), doc);
}

#[test]
fn train_and_eval_replay_byte_for_byte() {
    let (_d, cfg, out) = setup(SMALL);
    let out_b = format!("{out}-b");
    for o in [&out, &out_b] {
        train(&cfg, o, &["--seed", "3"]);
        assert_eq!(caw(&["eval", "--config", &cfg, "--out", o, "--seed", "3"]).status.code(), Some(0));
    }
    for f in ["checkpoint.cawm", "train_log.jsonl", "pretrain_log.jsonl", "summary.json", "eval_report.json"] {
        let a = fs::read(Path::new(&out).join(f)).unwrap();
        let b = fs::read(Path::new(&out_b).join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn ablate_writes_three_arms_with_a_shared_digest() {
    let (_d, cfg, out) = setup(SMALL);
    let o = caw(&["ablate", "--config", &cfg, "--out", &out, "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(Path::new(&out).join("ablation.json"));
    let arms = doc["arms"].as_array().unwrap();
    let names: Vec<&str> = arms.iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["L_CE", "+L_CA", "+L_Reg"]);
    assert!(arms.iter().all(|a| a["shared_config_digest"] == arms[0]["shared_config_digest"]));
    assert_eq!((arms[2]["alpha"].as_f64(), arms[2]["beta"].as_f64()), (Some(6.0), Some(3.0)));
    let csv = fs::read_to_string(Path::new(&out).join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn gradcheck_passes_and_fails_on_injected_fault() {
    let (_d, cfg, out) = setup(SMALL);
    let ok = caw(&["gradcheck", "--config", &cfg, "--out", &out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report = read_json(Path::new(&out).join("gradcheck.json"));
    assert_eq!(report["report"]["passed"], true);
    assert_eq!(report["report"]["components"].as_array().unwrap().len(), 8);

    let bad = caw(&["gradcheck", "--config", &cfg, "--out", &out, "--inject-fault", "--json"]);
    assert_eq!(bad.status.code(), Some(5));
    let doc: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(doc["report"]["passed"], false);
}

#[test]
fn gradcheck_on_the_identity_encoder() {
    let cfg = r#"{ "gradcheck": { "states": 10, "arch": { "kind": "identity", "dim": 4 }, "classes": 3 } }"#;
    let (_d, cfg, out) = setup(cfg);
    let o = caw(&["gradcheck", "--config", &cfg, "--out", &out, "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["report"]["passed"], true);
}
