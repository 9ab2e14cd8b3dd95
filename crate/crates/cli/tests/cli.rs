use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trdetr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trdetr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn trdetr")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(trdetr(&["--help"]).status.code(), Some(0));
    assert_eq!(trdetr(&["bogus"]).status.code(), Some(1));
    assert_eq!(trdetr(&["train"]).status.code(), Some(1));
}

#[test]
fn gradcheck_is_reproducible() {
    let args = ["gradcheck", "--seed", "7", "--kernel-seeds", "3", "--e2e-seeds", "1"];
    let a = trdetr(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(a.stdout, trdetr(&args).stdout);
}

#[test]
fn synth_train_predict_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("train.json");
    let ckpt = dir.path().join("model.ckpt");
    let preds = dir.path().join("preds.jsonl");
    let synth = dir.path().join("synth.json");
    fs::write(&synth, r#"{"num_samples": 4}"#).unwrap();
    fs::write(&cfg, r#"{"max_steps": 3, "d": 16, "num_queries": 4, "heads": 2, "batch_size": 2}"#).unwrap();

    let ok = |o: Output| {
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    ok(trdetr(&["synth", "--config", path(&synth), "--seed", "1", "--out", path(&data)]));
    ok(trdetr(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&ckpt)]));
    ok(trdetr(&["predict", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(&preds)]));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 4);

    let from_model = ok(trdetr(&["eval", "--ckpt", path(&ckpt), "--data", path(&data)]));
    let from_file = ok(trdetr(&["eval", "--preds", path(&preds), "--data", path(&data)]));
    assert_eq!(from_model, from_file);
    let report: serde_json::Value = serde_json::from_slice(&from_model).unwrap();
    assert!(report["map_avg"].is_number());

    let missing = dir.path().join("nope.ckpt");
    assert_eq!(trdetr(&["eval", "--ckpt", path(&missing), "--data", path(&data)]).status.code(), Some(1));
}

#[test]
fn bad_config_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(trdetr(&["synth", "--out", path(&data)]).status.code(), Some(0));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"learning_rat": 0.1}"#).unwrap();
    let out = dir.path().join("m.ckpt");
    let o = trdetr(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(&cfg, r#"{"heads": 3, "d": 16}"#).unwrap();
    let o = trdetr(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
}
