//! Run directories, replay checks and the command-line interface on a toy
//! configuration.

use std::fs;
use std::path::Path;
use std::process::Command;

use ticketlab::experiments::{
    run_dense, run_ticket, store, ExperimentConfig, ExperimentError, ModelConfig, Regime, RunResult, RunSummary,
    StructureConfig,
};
use ticketlab::tasks::{TaskKind, TaskSpec};

fn toy() -> ExperimentConfig {
    ExperimentConfig {
        task: TaskSpec::modular(TaskKind::ModularAdd, 11, 0.5, 0),
        model: ModelConfig {
            d_emb: 16,
            d_hid: 8,
            kappa: 1.0,
        },
        epochs: 40,
        snapshot_interval: 20,
        checkpoint_interval: Some(10),
        structure: StructureConfig {
            graph_nodes: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_runs_write_identical_files() {
    let cfg = toy();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_dense(&cfg, 4).unwrap().save(a.path(), &cfg).unwrap();
    run_dense(&cfg, 4).unwrap().save(b.path(), &cfg).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);
}

#[test]
fn saved_run_reloads_and_summary_matches_trace() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    let run = run_dense(&cfg, 5).unwrap();
    run.save(dir.path(), &cfg).unwrap();
    let (cfg2, back) = RunResult::load(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(back.trace.records, run.trace.records);
    assert_eq!(back.trace.snapshots, run.trace.snapshots);
    assert_eq!(back.summary, run.summary);
    assert_eq!(back.init, run.init);
    assert_eq!(back.checkpoints.len(), run.checkpoints.len());
    assert_eq!(back.final_params, run.final_params);
    assert_eq!(RunSummary::from_trace(&back.trace, cfg.threshold).t_gen, run.summary.t_gen);
    assert!(back.summary.matches_trace(&back.trace, cfg.threshold));

    // A ticket from the reloaded run equals one from the in-memory run.
    let tcfg = cfg.with_regime(Regime::Ticket);
    let t1 = run_ticket(&tcfg, &run, Some(20), 0.5).unwrap();
    let t2 = run_ticket(&tcfg, &back, Some(20), 0.5).unwrap();
    assert_eq!(t1.trace.records, t2.trace.records);
}

#[test]
fn mismatched_config_is_detected() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    run_dense(&cfg, 6).unwrap().save(dir.path(), &cfg).unwrap();

    let other = ExperimentConfig { epochs: 41, ..toy() };
    let err = run_dense(&other, 6).unwrap().save(dir.path(), &other).unwrap_err();
    assert!(matches!(err, ExperimentError::HashMismatch { .. }));

    // Editing the stored config breaks the replay check.
    let path = dir.path().join("config.json");
    store::save_text(&path, &other.to_json()).unwrap();
    assert!(matches!(RunResult::load(dir.path()), Err(ExperimentError::HashMismatch { .. })));
}

#[test]
fn trace_carries_the_config_hash() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    let run = run_dense(&cfg, 7).unwrap();
    run.save(dir.path(), &cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(text.starts_with(&format!("# config_hash={}\n", cfg.cell_hash(7))));
    assert!(text.contains("epoch,train_loss,test_loss,train_acc,test_acc,l1,l2"));
    let snap = fs::read_to_string(dir.path().join("snapshots/epoch_000020.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&snap).unwrap();
    assert_eq!(v["config_hash"], cfg.cell_hash(7));
    for key in ["epoch", "layers", "fe", "path_length", "clustering"] {
        assert!(v["snapshot"].get(key).is_some(), "{key}");
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ticketlab"))
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("toy.json");
    fs::write(&cfg_path, toy().to_json()).unwrap();
    let out = dir.path().join("dense");

    let st = cli()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "1", "--epochs", "30", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let v: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(v["runs"][0]["seed"], 1);
    assert_eq!(v["runs"][0]["summary"]["epochs_run"], 30);

    let ticket_out = dir.path().join("ticket");
    let st = cli()
        .args(["ticket", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "1", "--epochs", "30", "--timing", "20", "--rate", "0.5", "--source"])
        .arg(&out)
        .arg("--out")
        .arg(&ticket_out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));

    let st = cli().args(["metrics", "--run"]).arg(out.join("seed_1")).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let v: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert!(v["summary"].get("t_mem").is_some());

    let st = cli().args(["plot", "--run"]).arg(out.join("seed_1")).output().unwrap();
    assert!(st.status.success());
    assert!(fs::read_to_string(out.join("seed_1/accuracy.svg")).unwrap().starts_with("<svg"));

    let sweep_out = dir.path().join("sweep");
    let st = cli()
        .args(["sweep", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "1", "--epochs", "30", "--axis", "rate", "--values", "0.2,0.4", "--timing", "20", "--source"])
        .arg(&out)
        .arg("--out")
        .arg(&sweep_out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let csv = fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("value,seed,t_mem,t_gen,tau_grok\n0.2,1,"));
}

#[test]
fn command_line_errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"task": {"kind": "modular_add", "p": 10}}"#).unwrap();
    let st = cli().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert!(!st.status.success());
    let v: serde_json::Value = serde_json::from_slice(&st.stderr).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("10"));

    let st = cli().args(["metrics", "--run"]).arg(dir.path().join("missing")).output().unwrap();
    assert!(!st.status.success());
    let v: serde_json::Value = serde_json::from_slice(&st.stderr).unwrap();
    assert_eq!(v["error"], "io");
}
