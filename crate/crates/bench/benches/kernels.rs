use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use videococa_core::kernels::{gemm_nn, gemm_nt};

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("gemm");
    for n in [16, 64, 256] {
        let a = random(n * n, &mut rng);
        let b = random(n * n, &mut rng);
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::new("nn", n), &n, |bench, &n| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nn(n, n, n, black_box(&a), black_box(&b), &mut out);
            })
        });
        group.bench_with_input(BenchmarkId::new("nt", n), &n, |bench, &n| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nt(n, n, n, black_box(&a), black_box(&b), &mut out);
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gemm);
criterion_main!(benches);
