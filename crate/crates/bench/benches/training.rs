use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spowl_bench::{agent, batch, desk_config};

fn update(c: &mut Criterion) {
    let cfg = desk_config();
    let mut agent = agent(&cfg, 0);
    let batch = batch(&cfg, agent.model.obs_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("update/desk", |b| b.iter(|| agent.update(&batch, &mut rng).unwrap()));
    let targets = agent.model.td_targets(&batch, &agent.policy, &mut rng).unwrap();
    c.bench_function("model-loss/desk", |b| b.iter(|| agent.model.model_loss(&batch, &targets).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = update
}
criterion_main!(benches);
