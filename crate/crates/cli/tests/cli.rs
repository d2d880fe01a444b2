use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn anchor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchor")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = anchor(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    let err: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    err["error"]["kind"].as_str().unwrap().to_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_trains_and_evaluates_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("demos.jsonl");
    let anchors = dir.path().join("anchors.json");
    let policy = dir.path().join("policy");

    let summary: Value = serde_json::from_str(&ok(&["gen-data", "--task", "place", "--episodes", "12", "--seed", "1", "--out", p(&data)])).unwrap();
    assert_eq!(summary["episodes"], 12);

    let built: Value = serde_json::from_str(&ok(&[
        "build-anchors", "--dataset", p(&data), "--horizon", "3", "--clusters", "4", "--out", p(&anchors),
    ]))
    .unwrap();
    assert_eq!(built["anchors"], 4);
    assert!(built["coverage"]["mean"].as_f64().unwrap() >= 0.0);

    let log = ok(&[
        "train", "--task", "place", "--head", "anchored", "--chunks", "3", "--steps", "30", "--dataset", p(&data),
        "--anchors", p(&anchors), "--out", p(&policy),
    ]);
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert_eq!(std::fs::read_to_string(policy.join("train_log.jsonl")).unwrap(), log);

    let eval = |name: &str| {
        let out = dir.path().join(name);
        ok(&["eval", "--policy", p(&policy), "--task", "place", "--episodes", "3", "--trials", "2", "--seed", "5", "--out", p(&out)]);
        std::fs::read(out).unwrap()
    };
    let a = eval("a.csv");
    assert_eq!(a, eval("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# config {"));
    assert_eq!(text.lines().count(), 2 + 6);

    let viz = dir.path().join("viz.csv");
    let spread: Value = serde_json::from_str(&ok(&["viz-export", "--policy", p(&policy), "--episodes", "2", "--out", p(&viz)])).unwrap();
    assert!(spread["rows"].as_u64().unwrap() > 0);
}

#[test]
fn help_and_version_exit_cleanly() {
    assert!(anchor(&["--help"]).status.success());
    assert!(anchor(&["--version"]).status.success());
}

#[test]
fn usage_errors_are_reported_as_json() {
    let out = anchor(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
    let out = anchor(&["train", "--head", "bogus", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = anchor(&["eval", "--policy", p(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "io");

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "horizon = 0\n").unwrap();
    let out = anchor(&["--config", p(&cfg), "gen-data", "--out", p(&dir.path().join("d.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "config");

    let out = anchor(&["--set", "nokey", "gen-data", "--out", "unused"]);
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn config_file_sets_the_generation_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"task": "reach_left_right", "data_episodes": 4, "seed": 2}"#).unwrap();
    let out = dir.path().join("d.jsonl");
    let summary: Value = serde_json::from_str(&ok(&["--config", p(&cfg), "gen-data", "--out", p(&out)])).unwrap();
    assert_eq!(summary["task"], "reach_left_right");
    assert_eq!(summary["episodes"], 4);
    let overridden: Value =
        serde_json::from_str(&ok(&["--config", p(&cfg), "--set", "data_episodes=2", "gen-data", "--out", p(&out)])).unwrap();
    assert_eq!(overridden["episodes"], 2);
}
