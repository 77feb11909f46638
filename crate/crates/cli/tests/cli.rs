use std::path::Path;
use std::process::{Command, Output};

fn qcmhm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcmhm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("QCMHM_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(qcmhm(&["--help"]).status.code(), Some(0));
    assert_eq!(qcmhm(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = qcmhm(&["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(qcmhm(&[]).status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = qcmhm(&["train-kg", "--facts", "/nonexistent/facts.tsv", "--out", s(&dir.path().join("kg.json"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = qcmhm(&["--config", s(&cfg), "generate", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_world_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = qcmhm(&["generate", "--out", s(dir.path()), "--first-year", "2010", "--last-year", "2000"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_is_reproducible_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = qcmhm(&["--seed", "5", "generate", "--out", s(d.path()), "--entities", "30", "--questions-per-category", "10"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["facts.tsv", "train.jsonl", "dev.jsonl", "test.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_eval_explain_flow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let run = |args: &[&str]| {
        let out = qcmhm(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["generate", "--out", s(dir.path()), "--entities", "24", "--questions-per-category", "6"]);
    run(&["train-kg", "--facts", s(&p("facts.tsv")), "--out", s(&p("kg.json")), "--dim", "4", "--kg-epochs", "3"]);
    run(&[
        "train-qa", "--facts", s(&p("facts.tsv")), "--train", s(&p("train.jsonl")), "--kg", s(&p("kg.json")),
        "--out", s(&p("qa.json")), "--width", "8", "--epochs", "1", "--top-k", "3", "--gnn-layers", "1",
    ]);
    let report = p("report");
    std::fs::create_dir_all(&report).unwrap();
    run(&["eval", "--facts", s(&p("facts.tsv")), "--questions", s(&p("test.jsonl")), "--model", s(&p("qa.json")), "--out", s(&report)]);
    for f in ["report.md", "report.json", "hits.svg", "predictions.jsonl"] {
        assert!(report.join(f).exists(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert!(json["overall"]["hits1"].as_f64().unwrap() >= 0.0);
    run(&[
        "explain", "--facts", s(&p("facts.tsv")), "--questions", s(&p("test.jsonl")), "--model", s(&p("qa.json")),
        "--index", "0", "--out", s(&p("explain.json")),
    ]);
    assert!(p("explain.json").exists());

    // A checkpoint from one world does not load against another.
    let other = tempfile::tempdir().unwrap();
    run(&["--seed", "99", "generate", "--out", s(other.path()), "--entities", "40", "--questions-per-category", "6"]);
    let out = qcmhm(&[
        "eval", "--facts", s(&other.path().join("facts.tsv")), "--questions", s(&other.path().join("test.jsonl")),
        "--model", s(&p("qa.json")), "--out", s(&report),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
