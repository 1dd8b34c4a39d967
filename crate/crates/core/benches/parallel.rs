use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kdqn_core::kan::{KanConfig, KanNetwork, KanTape};
use kdqn_core::parallel::{map_chunks, map_chunks_sequential};
use kdqn_core::qnet::QFunction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch_gradient(net: &KanNetwork, xs: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = KanTape::default();
    let mut grad = vec![0.0; net.num_params()];
    let upstream = vec![1.0; net.output_width()];
    for x in xs {
        QFunction::forward_tape(net, x, &mut tape).unwrap();
        QFunction::backward(net, &tape, &upstream, &mut grad);
    }
    grad
}

fn gradients(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("batch_gradient");
    for hidden in [vec![32, 32], vec![64, 64]] {
        let cfg = KanConfig { hidden: hidden.clone(), ..KanConfig::default() };
        let net = KanNetwork::new(6, 5, &cfg, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..64).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let label = format!("{hidden:?}");
        group.bench_with_input(BenchmarkId::new("map_chunks", &label), &xs, |b, xs| {
            b.iter(|| map_chunks(xs, 8, |chunk| batch_gradient(&net, chunk)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", &label), &xs, |b, xs| {
            b.iter(|| map_chunks_sequential(xs, 8, |chunk| batch_gradient(&net, chunk)))
        });
    }
    group.finish();
}

criterion_group!(benches, gradients);
criterion_main!(benches);
