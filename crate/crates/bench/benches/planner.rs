use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spowl_bench::{agent, desk_config};
use spowl_core::envs::{GridCmdp, GridCmdpConfig, GridPolicy};
use spowl_core::planner::{plan, PlannerConfig};

fn grid_exact(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let env = GridCmdp::new(GridCmdpConfig::random(5, 5, 0.1, 0.3, &mut rng)).unwrap();
    let policy = GridPolicy::random(env.num_states(), &mut rng);
    let model = env.exact_model(&policy, 0.9, 0.9).unwrap();
    let z0 = model.latent(0).into_vec();
    let mut group = c.benchmark_group("plan/grid-exact");
    for samples in [64, 512] {
        let cfg = PlannerConfig { horizon: 2, samples, prior: 16, elites: 16, ..PlannerConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(samples), &cfg, |b, cfg| {
            b.iter(|| plan(&z0, None, cfg, &model, &policy, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn world_model(c: &mut Criterion) {
    let cfg = desk_config();
    let agent = agent(&cfg, 0);
    let obs = vec![0.1; agent.model.obs_dim()];
    let z0 = agent.model.encode(&obs).unwrap().into_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let planner = cfg.planner_for_mode();
    c.bench_function("plan/desk-world-model", |b| {
        b.iter(|| plan(&z0, None, &planner, &agent.model, &agent.policy, &mut rng).unwrap())
    });
    let mut acting = agent.clone();
    c.bench_function("act/desk-spowl", |b| b.iter(|| acting.act(&obs, false, &mut rng).unwrap()));
}

criterion_group!(benches, grid_exact, world_model);
criterion_main!(benches);
