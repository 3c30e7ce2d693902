use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use patchprune::io::{random_weights, ImageRGB};
use patchprune::model::forward;
use patchprune::{Backend, Exec, IndicatorKind, Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BACKENDS: [(&str, Backend); 2] = [("sequential", Backend::Sequential), ("parallel", Backend::Parallel)];

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    // token x qkv projection, and the MLP expansion
    for (n, k, m) in [(197, 384, 384), (197, 384, 1536)] {
        let a = random_matrix(n, k, &mut rng);
        let b = random_matrix(k, m, &mut rng);
        for (name, backend) in BACKENDS {
            let exec = Exec::new(backend);
            group.bench_with_input(BenchmarkId::new(name, format!("{n}x{k}x{m}")), &(), |bench, _| {
                bench.iter(|| exec.matmul(black_box(&a), black_box(&b)).unwrap())
            });
        }
    }
    group.finish();
}

fn deit_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let image = ImageRGB::random(224, 1);
    for r in [1.0, 0.5] {
        let cfg = ModelConfig {
            keep_rate: r,
            indicator: if r < 1.0 { IndicatorKind::Variance } else { IndicatorKind::None },
            ..ModelConfig::deit_small()
        };
        let weights = random_weights(&cfg, 1);
        for (name, backend) in BACKENDS {
            let exec = Exec::new(backend);
            group.bench_with_input(BenchmarkId::new(name, format!("r={r}")), &(), |bench, _| {
                bench.iter(|| forward(black_box(&image), &weights, &cfg, &exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, matmul, deit_forward);
criterion_main!(benches);
