use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spowl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spowl")).args(args).env("RUST_LOG", "warn").output().expect("spawn spowl")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_then_eval_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = configs().join("smoke.toml");
    let o = spowl(&["train", "--config", config.to_str().unwrap(), "--seed", "3", "--mode", "plan-only", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("trained 300 steps"));
    for f in ["metrics.csv", "manifest.json", "checkpoint.json", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 3") && saved.contains("mode = \"plan-only\""), "{saved}");

    let ckpt = out.join("checkpoint.json");
    let o = spowl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("eval: 2 episodes") && text.contains("plan balance 1.000"), "{text}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "total_steps = 10\n[planner]\nsamplez = 3\n").unwrap();
    let o = spowl(&["train", "--config", config.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("samplez"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn eval_rejects_missing_checkpoints_and_zero_episodes() {
    let o = spowl(&["eval", "--checkpoint", "/nonexistent/checkpoint.json", "--episodes", "1"]);
    assert!(!o.status.success());
    let o = spowl(&["eval", "--checkpoint", "/nonexistent/checkpoint.json", "--episodes", "0"]);
    assert!(!o.status.success());
}

#[test]
fn ablate_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    let base = configs().join("smoke.toml");
    std::fs::write(
        &grid,
        format!(
            "base = {:?}\nseeds = [0, 1]\n[common]\ntotal_steps = 150\n[[variant]]\nname = \"policy\"\nmode = \"policy-only\"\n[[variant]]\nname = \"plan\"\nmode = \"plan-only\"\n",
            base.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = dir.path().join("ablation");
    let o = spowl(&["ablate", "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = std::fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    let summary = std::fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
    assert!(out.join("plan").join("seed-1").join("metrics.csv").exists());
}

#[test]
fn oracle_check_passes() {
    let o = spowl(&["oracle-check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS finite-differences") && !text.contains("FAIL"), "{text}");
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let config = configs().join("smoke.toml");
    let o = spowl(&["train", "--config", config.to_str().unwrap(), "--mode", "greedy"]);
    assert!(!o.status.success());
}
