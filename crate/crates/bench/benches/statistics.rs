use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use perfowave::lab::{energy_distance, energy_distance_se, ks_statistic};
use perfowave_bench::sample;

fn distances(c: &mut Criterion) {
    let mut group = c.benchmark_group("two_sample");
    for n in [64, 1024, 16384] {
        let a = sample(n, 1);
        let b: Vec<f64> = sample(n, 2).iter().map(|x| x + 0.1).collect();
        group.bench_with_input(BenchmarkId::new("energy_distance", n), &n, |bench, _| {
            bench.iter(|| energy_distance(&a, &b).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("ks", n), &n, |bench, _| {
            bench.iter(|| ks_statistic(&a, &b).unwrap())
        });
    }
    let a = sample(64, 3);
    let b = sample(64, 4);
    group.bench_function("jackknife_se_64", |bench| {
        bench.iter(|| energy_distance_se(&a, &b).unwrap())
    });
    group.finish();
}

criterion_group!(benches, distances);
criterion_main!(benches);
