use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use groundset_core::{build_vocab, generate_synthetic, solve_hungarian, Matrix, Model, RunConfig, SyntheticSpec};

fn hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [4, 12, 60] {
        let cost = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| solve_hungarian(cost).expect("square finite matrix"))
        });
    }
    group.finish();
}

fn model_passes(c: &mut Criterion) {
    let config = RunConfig::desk();
    let data = generate_synthetic(&SyntheticSpec::default(), 16, 5).expect("default spec");
    let vocab = build_vocab(&data, &config.schema().expect("desk schema"));
    let model = Model::new(config, vocab).expect("desk model");
    let ex = &data[0];
    let padded = model
        .pad(&model.gold_targets(ex).expect("targets"))
        .expect("fits in the query set");

    c.bench_function("predict (desk)", |b| b.iter(|| model.predict(ex).expect("forward")));
    c.bench_function("loss and gradients (desk)", |b| {
        b.iter(|| model.loss_and_grads(ex, &padded).expect("backward"))
    });
}

criterion_group!(benches, hungarian, model_passes);
criterion_main!(benches);
