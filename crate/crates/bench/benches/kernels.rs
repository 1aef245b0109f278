use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dgff_core::fields::{gibbs, sample_dgff};
use dgff_core::greens::{cholesky, green_and_factor, green_exact, green_mc_batched, DEFAULT_DENSE_CAP};
use dgff_core::limitproc::{sample_ppp, sample_q, truncation_level, DecorationModel, LimitParams};
use dgff_core::{build_lattice, DomainSpec, SeedSource, BETA_C};

fn square(n: u32) -> Arc<dgff_core::Lattice> {
    Arc::new(build_lattice(DomainSpec::UnitSquare, n).unwrap())
}

fn factorisation(c: &mut Criterion) {
    let mut group = c.benchmark_group("green");
    group.sample_size(10);
    for n in [16u32, 32] {
        let lat = square(n);
        group.bench_with_input(BenchmarkId::new("green_and_factor", n), &lat, |b, lat| {
            b.iter(|| green_and_factor(lat, DEFAULT_DENSE_CAP).unwrap())
        });
        let g = green_exact(&lat, DEFAULT_DENSE_CAP).unwrap();
        group.bench_with_input(BenchmarkId::new("dense_cholesky", n), &g, |b, g| b.iter(|| cholesky(g).unwrap()));
    }
    let lat = square(12);
    let seeds = SeedSource::new(1);
    group.bench_function("random_walks_10k", |b| b.iter(|| green_mc_batched(&lat, 40, 10_000, 4, &seeds).unwrap()));
    group.finish();
}

fn fields(c: &mut Criterion) {
    let lat = square(32);
    let (_, chol) = green_and_factor(&lat, DEFAULT_DENSE_CAP).unwrap();
    let mut rng = SeedSource::new(2).stream("bench", 0);
    c.bench_function("sample_dgff_32", |b| b.iter(|| sample_dgff(&chol, &mut rng)));
    let f = sample_dgff(&chol, &mut rng);
    c.bench_function("gibbs_32", |b| b.iter(|| gibbs(black_box(&f), 2.0 * BETA_C).unwrap()));
}

fn limit_process(c: &mut Criterion) {
    let beta = 2.0 * BETA_C;
    let level = truncation_level(&[beta], 1e-4).unwrap();
    let mut rng = SeedSource::new(3).stream("bench", 0);
    c.bench_function("sample_ppp", |b| b.iter(|| sample_ppp(level, &mut rng).unwrap()));
    let seeds = SeedSource::new(4);
    let table = DecorationModel::TwoSite { gaps: vec![0.5, 1.5] }.table(1, &seeds).unwrap();
    let params = LimitParams { level, epsilon: 1e-4, replicates: 1000 };
    c.bench_function("sample_q_1000", |b| b.iter(|| sample_q(beta, 1.5 * beta, &table, params, &seeds).unwrap()));
}

criterion_group!(benches, factorisation, fields, limit_process);
criterion_main!(benches);
