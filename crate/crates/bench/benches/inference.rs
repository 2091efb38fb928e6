use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geoagg::model::predict;
use geoagg::pipeline::{benchmark_inference, CacheMode};
use geoagg::data::rng::seeded;
use geoagg::spatial::{assemble_from_neighbors, neighbor_budget};
use geoagg_bench::fixture;

fn knn(c: &mut Criterion) {
    let f = fixture(2500, 100);
    let mut group = c.benchmark_group("knn");
    for k in [16, 80, 160] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            let mut i = 0;
            b.iter(|| {
                let q = &f.queries.points()[i % f.queries.len()];
                i += 1;
                black_box(f.context.knn(q.u, q.v, k))
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let f = fixture(2500, 1);
    let target = &f.queries.points()[0];
    let mut group = c.benchmark_group("forward");
    for len in [16, 32, 64, 128] {
        let nbrs = f.context.knn(target.u, target.v, neighbor_budget(len, 1.25, false));
        let seq = assemble_from_neighbors(target, &nbrs, &f.context, len, &mut seeded(0)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(len), &seq, |b, seq| {
            b.iter(|| black_box(predict(&f.params, seq).unwrap()))
        });
    }
    group.finish();
}

fn ensemble(c: &mut Criterion) {
    let f = fixture(2500, 50);
    let mut group = c.benchmark_group("ensemble_8_members");
    group.sample_size(10);
    for mode in [CacheMode::Precomputed, CacheMode::OnTheFly] {
        group.bench_function(mode.as_str(), |b| {
            b.iter(|| benchmark_inference(&f.params, &f.queries, &f.context, &[64], 8, 1.25, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, knn, forward, ensemble);
criterion_main!(benches);
