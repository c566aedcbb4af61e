use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ppls_bench::problem;
use ppls_core::objective::{dense_nll, euclid_grads, scalar_nll};

fn objective(c: &mut Criterion) {
    let mut g = c.benchmark_group("objective");
    for p in [20, 50, 100] {
        let pr = problem(p, p, 3, 1000, 1);
        g.bench_with_input(BenchmarkId::new("scalar_nll", p), &pr, |b, pr| {
            b.iter(|| scalar_nll(black_box(&pr.init), &pr.moments).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dense_nll", p), &pr, |b, pr| {
            b.iter(|| dense_nll(black_box(&pr.init), &pr.moments).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("euclid_grads", p), &pr, |b, pr| {
            b.iter(|| euclid_grads(black_box(&pr.init), &pr.moments).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, objective);
criterion_main!(benches);
