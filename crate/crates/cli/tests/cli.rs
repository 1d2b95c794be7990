use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn plc(args: &[&str], workdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plc"))
        .args(args)
        .env("PLC_WORKDIR", workdir)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "split": {"train_scenes": 2, "eval_scenes": 1},
        "scene": {"view_count": 2},
        "train": {"steps": 3, "model": {"hidden": 16}},
    });
    if let (Value::Object(base), Value::Object(extra)) = (&mut cfg, extra) {
        base.extend(extra);
    }
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = plc(&["gradcheck", "--loss", "rpdc", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn gradcheck_json_is_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = plc(&["gradcheck", "--json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["losses"].as_array().unwrap().len(), 4);
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn fuse_with_inverted_thresholds_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({"fusion": {"t_low": 0.5, "t_high": 0.2}}));
    let out = plc(&["fuse", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("t_low") && stderr.contains("t_high"), "{stderr}");
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = plc(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("Usage"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({"trian": {}}));
    let out = plc(&["gen", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = plc(&["gen", "--config", "/nonexistent/c.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_before_train_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let out = plc(&["eval", "--config", cfg.to_str().unwrap()], &dir.path().join("work"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let work = dir.path().join("work");
    let run = || {
        let out = plc(&["pipeline", "--config", cfg.to_str().unwrap(), "--json"], &work);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let metrics = fs::read(work.join("metrics.json")).unwrap();
        (out.stdout, metrics)
    };
    let (stdout_a, metrics_a) = run();
    let (stdout_b, metrics_b) = run();
    assert_eq!(metrics_a, metrics_b);
    assert_eq!(stdout_a, stdout_b);
    let v: Value = serde_json::from_slice(&stdout_a).unwrap();
    assert!(v.get("hiou").is_some());
}

#[test]
fn stages_run_one_at_a_time_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let cfg = cfg.to_str().unwrap();
    let staged = dir.path().join("staged");
    for stage in ["gen", "caption", "associate", "fuse", "embed", "train", "eval"] {
        let out = plc(&[stage, "--config", cfg, "--sequential"], &staged);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let chained = dir.path().join("chained");
    assert_eq!(plc(&["pipeline", "--config", cfg], &chained).status.code(), Some(0));
    assert_eq!(
        fs::read(staged.join("metrics.json")).unwrap(),
        fs::read(chained.join("metrics.json")).unwrap()
    );
}
