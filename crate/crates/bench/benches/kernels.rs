use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use pilrecon_bench::problem;
use pilrecon_core::loss::evaluate;
use pilrecon_core::net::{MlpParams, MlpSpec};
use pilrecon_core::trainer::TrainConfig;

fn network(c: &mut Criterion) {
    let p = problem(64, 128, 0.0);
    let params = MlpParams::init(&MlpSpec::default(), 1);
    let mut g = c.benchmark_group("mlp");
    for n in [512usize, 8192] {
        let pts = &p.coords[..n];
        let up = vec![1.0; n];
        g.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| params.forward(black_box(pts)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", n), &n, |b, _| {
            b.iter(|| params.backward(black_box(pts), &up).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("spatial_gradient", n), &n, |b, _| {
            b.iter(|| params.spatial_gradient(black_box(pts)).unwrap())
        });
    }
    g.finish();
}

fn loss(c: &mut Criterion) {
    let p = problem(64, 128, 0.0);
    let params = MlpParams::init(&MlpSpec::default(), 1);
    let f = params.forward(&p.coords).unwrap();
    c.bench_function("loss/full_map_64x128", |b| {
        b.iter(|| evaluate(black_box(&f), None, &p.partition, &p.weights).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    for (batch, gradient_weight) in [(512usize, 0.0), (512, 1.0), (0, 0.0)] {
        let p = problem(64, 128, gradient_weight);
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: batch,
            record_every: 1000,
            ..TrainConfig::paper()
        };
        let id = format!("batch{batch}_grad{gradient_weight}");
        g.bench_function(BenchmarkId::new("50_steps", id), |b| {
            b.iter(|| p.train(&cfg, &mut |_, _| {}).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, network, loss, training);
criterion_main!(benches);
