use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tracehead"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("RUST_LOG").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Planted workspace with a small bootstrap so tests stay quick.
fn workspace(dir: &Path, tasks: usize) -> PathBuf {
    let o = run(&["generate", "--out", dir.to_str().unwrap(), "--tasks", &tasks.to_string(), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let path = dir.join("config.json");
    edit(&path, |c| c["eval"]["report"]["bootstrap"]["n_boot"] = 500.into());
    path
}

fn edit(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn stage(cfg: &Path, verb: &str) -> Output {
    run(&["--config", cfg.to_str().unwrap(), verb])
}

#[test]
fn pipeline_runs_and_stage_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 60);
    let o = stage(&cfg, "pipeline");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("run");
    for f in ["report.json", "report.md", "frontier.csv", "shap.csv", "model.bin", "scores.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let deterministic = [
        "labels.csv",
        "parse_report.json",
        "feature_card.json",
        "feature_table.csv",
        "calls_extract.jsonl",
        "synth_rows.jsonl",
        "alignment_report.json",
        "augmented_table.csv",
        "calls_synth.jsonl",
        "folds.json",
        "scores.csv",
        "model.bin",
        "train_report.json",
        "scores_bm25.csv",
        "scores_dense.csv",
        "shap.csv",
    ];
    let before: Vec<Vec<u8>> = deterministic.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
    for verb in ["ingest", "extract", "synth", "train", "eval"] {
        let o = stage(&cfg, verb);
        assert_eq!(code(&o), 0, "{verb}: {}", stderr(&o));
    }
    for (f, b) in deterministic.iter().zip(&before) {
        assert_eq!(&std::fs::read(out.join(f)).unwrap(), b, "{f} changed on rerun");
    }
}

#[test]
fn empty_mock_script_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 30);
    std::fs::write(dir.path().join("mock_script.jsonl"), "").unwrap();
    assert_eq!(code(&stage(&cfg, "ingest")), 0);
    let o = stage(&cfg, "extract");
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn empty_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 30);
    std::fs::write(dir.path().join("trajectories.jsonl"), "").unwrap();
    let o = stage(&cfg, "ingest");
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_without_features_names_extract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 30);
    let o = stage(&cfg, "train");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run `extract` first"), "{}", stderr(&o));
}

#[test]
fn malformed_line_is_skipped_unless_strict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 30);
    let traj = dir.path().join("trajectories.jsonl");
    let mut text = std::fs::read_to_string(&traj).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&traj, text).unwrap();
    assert_eq!(code(&stage(&cfg, "ingest")), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/parse_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_skipped"], 1);
    assert_eq!(report["skipped"][0]["index"], 30);
    let o = run(&["--config", cfg.to_str().unwrap(), "--strict", "ingest"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn secrets_are_rejected_in_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 30);
    edit(&cfg, |c| {
        c["provider"]["remote"] = serde_json::json!({
            "endpoint": "http://127.0.0.1:9/v1/chat/completions",
            "model": "m",
            "api_key_env": "TRACEHEAD_TEST_KEY",
            "api_key": "sk-inline",
        })
    });
    let o = stage(&cfg, "ingest");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("api_key"), "{}", stderr(&o));
}

#[test]
fn remote_key_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 30);
    edit(&cfg, |c| {
        c["provider"]["remote"] = serde_json::json!({
            "endpoint": "http://127.0.0.1:9/v1/chat/completions",
            "model": "m",
            "api_key_env": "TRACEHEAD_TEST_KEY_UNSET",
        })
    });
    assert_eq!(code(&stage(&cfg, "ingest")), 0);
    let o = bin()
        .args(["--config", cfg.to_str().unwrap(), "--provider", "remote", "extract"])
        .env_remove("TRACEHEAD_TEST_KEY_UNSET")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("TRACEHEAD_TEST_KEY_UNSET"), "{}", stderr(&o));
    // The configured remote endpoint is unroutable; the mock never touches it.
    let o = bin()
        .args(["--config", cfg.to_str().unwrap(), "--provider", "mock", "extract"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn cost_reconstructs_reference_rows() {
    let o = run(&[
        "cost",
        "--runtime", "a=0.002682",
        "--runtime", "b=100.48",
        "--runtime", "c=198.12",
        "--runtime", "d=378.42",
        "--metered", "e=0.052",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let costs: Vec<f64> = out
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
        .collect();
    let want = [2.0e-7, 0.00754, 0.0149, 0.0284, 0.052];
    for (c, w) in costs.iter().zip(want) {
        assert!((c - w).abs() / w <= 0.02, "{c} vs {w}");
    }
    assert!(out.lines().last().unwrap().ends_with("metered"));
}
