use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use replaylab::baselines::suite::REPORT_COLUMNS;
use replaylab::config::SEED_ENV;
use replaylab::graph::DiffusionGraph;

fn replaylab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replaylab"))
        .args(args)
        .env_remove(SEED_ENV)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMOKE: &str = r#"{
  "run_id": "smoke",
  "graph": {"nodes": 30, "seeds": [1]},
  "rsd": {"t_exp": 80, "t_decay": 30, "t_rep": 80, "episodes": 2},
  "methods": [{"id": "ge"}],
  "training": {"steps": 600, "hidden": 8},
  "seeds": {"master": 3}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gen_graph_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    for out in [&a, &b] {
        let o = replaylab(&["gen-graph", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let g = DiffusionGraph::from_json(&text).unwrap();
    assert_eq!(g.node_count(), 50);
    assert_eq!(g.seed(), 7);
}

#[test]
fn gen_graph_without_out_is_a_usage_error() {
    let o = replaylab(&["gen-graph", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn unknown_method_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMOKE.replace(r#"{"id": "ge"}"#, r#"{"id": "nonsense"}"#));
    let runs = tmp.path().join("runs");
    let o = replaylab(&["run", "--config", &cfg, "--runs-dir", runs.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonsense"), "{}", stderr(&o));
}

#[test]
fn smoke_run_is_reproducible_and_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let mut reports = Vec::new();
    for (k, workers) in ["1", "2"].into_iter().enumerate() {
        let runs = tmp.path().join(format!("runs{k}"));
        let o = replaylab(&["run", "--config", &cfg, "--runs-dir", runs.to_str().unwrap(), "--workers", workers]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(fs::read_to_string(runs.join("smoke/report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    let mut lines = reports[0].lines();
    assert_eq!(lines.next().unwrap(), REPORT_COLUMNS.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), REPORT_COLUMNS.len());
    assert_eq!(row[0], "ge");
    let ret_col = REPORT_COLUMNS.iter().position(|c| *c == "replay_ret_mean").unwrap();
    let ret: f64 = row[ret_col].parse().unwrap();
    assert!((ret - 1.0).abs() < 1e-12, "GE is its own reference, got {ret}");

    let run = tmp.path().join("runs0/smoke");
    let rebuilt = tmp.path().join("rebuilt.csv");
    let o = replaylab(&["report", "--run", run.to_str().unwrap(), "--out", rebuilt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(rebuilt).unwrap(), reports[0]);
}

#[test]
fn train_then_eval_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let ckpt = tmp.path().join("ckpt");
    let o = replaylab(&["train", "--config", &cfg, "--out", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = tmp.path().join("a");
    let o = replaylab(&[
        "rsd-eval",
        "--config",
        &cfg,
        "--checkpoints",
        ckpt.to_str().unwrap(),
        "--runs-dir",
        a.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = tmp.path().join("b");
    let o = replaylab(&["run", "--config", &cfg, "--runs-dir", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(a.join("smoke/report.csv")).unwrap(),
        fs::read_to_string(b.join("smoke/report.csv")).unwrap()
    );
}

#[test]
fn report_without_manifest_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = replaylab(&["report", "--run", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_on_small_trial_count() {
    let o = replaylab(&["verify", "--trials", "200", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 6);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn verify_rejects_zero_trials() {
    let o = replaylab(&["verify", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(2));
}
