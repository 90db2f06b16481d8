use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wit_bench::{raw, standardized};
use wit_core::penalty::DEFAULT_RHO;
use wit_core::selector::{
    build_transformed_design, cluster_ratios, ilamm_solve, individual_ratios,
};
use wit_core::tuning::{lambda_grid, Start};
use wit_core::{fit_wit, BuiltinCase, PenaltySpec, SolverConfig, WitConfig};

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("ilamm_solve");
    for (case, n) in [(BuiltinCase::C1IV, 1000), (BuiltinCase::C2I, 500)] {
        let ds = standardized(case, n);
        let td = build_transformed_design(&ds).unwrap();
        let grid = lambda_grid(ds.n(), ds.p()).unwrap();
        let spec = PenaltySpec::mcp(grid.values[grid.values.len() / 2], DEFAULT_RHO).unwrap();
        let zero = Start::zero(ds.p()).alpha0;
        let cfg = SolverConfig::default();
        group.bench_with_input(BenchmarkId::new(case.name(), ds.p()), &ds, |b, ds| {
            b.iter(|| ilamm_solve(&td, ds.y(), &spec, black_box(&zero), &cfg).unwrap())
        });
    }
    group.finish();
}

fn design(c: &mut Criterion) {
    let ds = standardized(BuiltinCase::C2I, 500);
    c.bench_function("transformed_design/p250", |b| {
        b.iter(|| build_transformed_design(black_box(&ds)).unwrap())
    });
    let ratios = individual_ratios(&ds.reduced_form().unwrap());
    c.bench_function("cluster_ratios/p250", |b| {
        b.iter(|| cluster_ratios(black_box(&ratios), None).unwrap())
    });
}

fn end_to_end(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_wit");
    group.sample_size(10);
    for (case, n) in [
        (BuiltinCase::C1II, 500),
        (BuiltinCase::C1IV, 1000),
        (BuiltinCase::C2I, 500),
    ] {
        let ds = raw(case, n);
        let cfg = WitConfig::default();
        group.bench_with_input(BenchmarkId::new(case.name(), n), &ds, |b, ds| {
            b.iter(|| fit_wit(black_box(ds), &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, solver, design, end_to_end);
criterion_main!(benches);
