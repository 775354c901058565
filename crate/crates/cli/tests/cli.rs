//! Smoke tests of every subcommand through the built binary.

use std::path::Path;
use std::process::{Command, Output};

use icode::diagnostics::tiny_setup;
use icode::encoders::FusionMode;

fn icode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icode")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let (model, synth) = tiny_setup(FusionMode::Merge);
    let overlay = serde_json::json!({
        "steps": 4,
        "warmup": 2,
        "chunk": 2,
        "model": model,
        "synth": synth,
        "stream": {"batch": 4},
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, overlay.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pretrain_then_evaluate_and_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    stdout(&icode(&["pretrain", "--config", &cfg, "--out", out, "--seed", "3"]));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let ckpt = dir.path().join("run/checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();

    let r: serde_json::Value =
        serde_json::from_str(&stdout(&icode(&["eval-retrieval", "--ckpt", ckpt, "--kind", "VS", "--n", "8"]))).unwrap();
    assert_eq!(r["n"], 8);
    assert!(r["r1_ab"].as_f64().unwrap() <= 1.0);

    let text = stdout(&icode(&[
        "finetune",
        "--ckpt",
        ckpt,
        "--task",
        "cls16",
        "--modalities",
        "VL",
        "--compare-scratch",
        "--settings",
        r#"{"train": 32, "test": 16, "epochs": 2, "batch": 16}"#,
    ]));
    let summary_start = text.find("{\n").unwrap();
    assert_eq!(text[..summary_start].lines().count(), 2);
    let s: serde_json::Value = serde_json::from_str(&text[summary_start..]).unwrap();
    assert!(s["pretrained"].is_number() && s["scratch"].is_number());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"stepz": 3}"#).unwrap();
    let o = icode(&["param-count", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));

    let o = icode(&["eval-retrieval", "--ckpt", "/nonexistent/ckpt.bin", "--kind", "VL"]);
    assert!(!o.status.success());
    let o = icode(&["finetune", "--ckpt", "x", "--task", "cls17"]);
    assert!(!o.status.success());
    let o = icode(&["grad-check", "--module", "nope", "--seeds", "1"]);
    assert!(!o.status.success());
}

#[test]
fn param_count_splits_groups() {
    let v: serde_json::Value = serde_json::from_str(&stdout(&icode(&["param-count"]))).unwrap();
    let total = v["total"].as_u64().unwrap();
    assert!(total > 0);
    assert_eq!(total, v["fusion_group"].as_u64().unwrap() + v["encoder_group"].as_u64().unwrap());
    assert_eq!(v["mode"], "merge");
}

#[test]
fn grad_check_single_module() {
    let text = stdout(&icode(&["grad-check", "--module", "temperature", "--seeds", "2"]));
    assert!(text.starts_with("temperature") && text.contains("ok"));
}

#[test]
fn pretrain_help_lists_defaults() {
    let text = stdout(&icode(&["pretrain", "--help"]));
    assert!(text.contains("\"lr_fusion\""));
}
