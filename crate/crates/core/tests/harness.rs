use std::path::{Path, PathBuf};

use spowl_core::envs::{Env, EnvConfig, PointHazardEnv};
use spowl_core::harness::*;
use spowl_core::Error;

fn smoke() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    RunConfig::load(&path).unwrap()
}

fn out(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn same_config_and_seed_give_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { seed: 5, ..smoke() };
    train(&cfg, &out(&dir, "a")).unwrap();
    train(&cfg, &out(&dir, "b")).unwrap();
    train(&RunConfig { seed: 6, ..cfg }, &out(&dir, "c")).unwrap();
    let read = |name: &str| std::fs::read(out(&dir, name).join(METRICS_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn run_directory_is_complete_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let run = out(&dir, "run");
    let summary = train(&smoke(), &run).unwrap();
    let manifest = Manifest::load(&run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.steps, summary.steps);
    assert_eq!(manifest.final_return_mean, summary.final_eval.return_mean);
    assert_eq!(manifest.config, smoke());
    assert_eq!(RunConfig::load(&run.join(CONFIG_FILE)).unwrap(), smoke());

    let rows = read_metrics(&run.join(METRICS_FILE)).unwrap();
    let finals: Vec<&MetricsRow> = rows.iter().filter(|r| r.phase == Phase::Final).collect();
    assert_eq!(finals.len(), smoke().final_eval_episodes);
    let train_rows: Vec<&MetricsRow> = rows.iter().filter(|r| r.phase == Phase::Train).collect();
    assert_eq!(train_rows.len(), summary.episodes);
    let last = train_rows.last().unwrap();
    let total_cost: f64 = train_rows.iter().map(|r| r.episode_cost).sum();
    assert!((last.cost_rate - total_cost / last.step as f64).abs() < 1e-12);
    assert_eq!(train_rows.iter().map(|r| r.episode_length).sum::<usize>(), last.step);
}

#[test]
fn checkpoints_round_trip_and_reject_other_versions() {
    let dir = tempfile::tempdir().unwrap();
    let run = out(&dir, "run");
    train(&smoke(), &run).unwrap();
    let path = run.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!((ckpt.format.as_str(), ckpt.version), (CHECKPOINT_FORMAT, CHECKPOINT_VERSION));
    let copy = out(&dir, "copy.json");
    ckpt.save(&copy).unwrap();
    assert_eq!(Checkpoint::load(&copy).unwrap(), ckpt);
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());

    let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    json["version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
    let bumped = out(&dir, "bumped.json");
    std::fs::write(&bumped, serde_json::to_vec(&json).unwrap()).unwrap();
    assert!(matches!(Checkpoint::load(&bumped), Err(Error::Load(_))));

    json["version"] = serde_json::json!(CHECKPOINT_VERSION);
    json["format"] = serde_json::json!("something-else");
    std::fs::write(&bumped, serde_json::to_vec(&json).unwrap()).unwrap();
    assert!(matches!(Checkpoint::load(&bumped), Err(Error::Load(_))));
    assert!(matches!(Checkpoint::load(&out(&dir, "missing.json")), Err(Error::Load(_))));
}

#[test]
fn diverging_training_aborts_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let run = out(&dir, "run");
    let mut cfg = smoke();
    cfg.world_model.optimizer.lr = 1e300;
    cfg.world_model.optimizer.grad_clip = 1e300;
    let err = train(&cfg, &run).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
    let diagnostic: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join(DIAGNOSTIC_FILE)).unwrap()).unwrap();
    assert!(diagnostic["error"].as_str().unwrap().contains("non-finite"), "{diagnostic}");
    assert!(run.join(ABORT_CHECKPOINT_FILE).exists());
    assert!(!run.join(CHECKPOINT_FILE).exists());
}

#[test]
fn single_variant_ablation_matches_checkpoint_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let grid = AblationGrid {
        seeds: vec![2, 3],
        variants: vec![Variant { name: "only".into(), config: smoke() }, Variant { name: "plan".into(), config: RunConfig { mode: Mode::PlanOnly, ..smoke() } }],
    };
    let report = run_ablation(&grid, dir.path()).unwrap();
    assert_eq!(report.runs.len(), 4);
    let runs_csv = std::fs::read_to_string(dir.path().join(RUNS_FILE)).unwrap();
    assert_eq!(runs_csv.lines().count(), 1 + 4);
    for run in report.runs_for("only") {
        let ckpt = dir.path().join("only").join(format!("seed-{}", run.seed)).join(CHECKPOINT_FILE);
        let eval = evaluate(&ckpt, smoke().final_eval_episodes).unwrap();
        assert_eq!(eval.return_mean, run.final_return);
        assert_eq!(eval.cost_mean, run.final_cost);
    }
    let s = report.summary_for("plan").unwrap();
    assert_eq!(s.seeds, 2);
    assert_eq!(s.balance_mean, Some(1.0));
}

#[test]
fn balance_is_zero_for_policy_only_and_one_for_plan_only() {
    let dir = tempfile::tempdir().unwrap();
    for (mode, want) in [(Mode::PolicyOnly, 0.0), (Mode::PlanOnly, 1.0)] {
        let s = train(&RunConfig { mode, ..smoke() }, &out(&dir, mode.name())).unwrap();
        assert_eq!(s.final_eval.balance_mean, Some(want));
        let rows = read_metrics(&out(&dir, mode.name()).join(METRICS_FILE)).unwrap();
        assert!(rows.iter().filter(|r| r.phase == Phase::Final).all(|r| r.balance == Some(want)));
    }
}

#[test]
fn episode_cost_counts_steps_that_end_inside_a_hazard() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    if let EnvConfig::Point(p) = &mut cfg.env {
        p.hazard_count = 6;
        p.hazard_radius = 0.6;
        p.path_hazards = 2;
    }
    cfg.total_steps = 200;
    train(&cfg, &out(&dir, "run")).unwrap();
    let agent = Checkpoint::load(&out(&dir, "run").join(CHECKPOINT_FILE)).unwrap().agent;
    let eval = evaluate_agent(&agent, &cfg, 4, true).unwrap();
    let EnvConfig::Point(p) = &cfg.env else { unreachable!() };
    let mut total_inside = 0;
    for (i, ep) in eval.episodes.iter().enumerate() {
        let mut env = PointHazardEnv::new(p.clone()).unwrap();
        env.reset(eval_env_seed(cfg.seed, i));
        let mut inside = 0;
        for step in ep.trace.as_ref().unwrap() {
            env.step(&step.action).unwrap();
            let pos = env.position();
            if env.hazards().iter().any(|h| (pos[0] - h.center[0]).hypot(pos[1] - h.center[1]) <= h.radius) {
                inside += 1;
            }
        }
        assert_eq!(ep.cost, inside as f64, "episode {i}");
        assert_eq!(ep.cost_rate(), inside as f64 / ep.length as f64);
        total_inside += inside;
    }
    assert!(total_inside > 0, "no hazard visits; the audit checked nothing");
}
