//! Sequential against parallel execution of the two hot loops: trajectory
//! batches and density transport. Build without default features to compare
//! against a binary that has no rayon at all.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pilotwave::exec::Execution;
use pilotwave::integrator::{integrate_batch_with, IntegratorConfig};
use pilotwave::relaxation::{transport_density_with, GridSpec, InitialDensity, Smoothing};
use pilotwave::wavefield::{Point2, Superposition};

fn modes() -> Vec<Execution> {
    if cfg!(feature = "parallel") {
        vec![Execution::Sequential, Execution::Parallel]
    } else {
        vec![Execution::Sequential]
    }
}

fn batch(c: &mut Criterion) {
    let state = Superposition::equal_weight_random_phase(Superposition::square_modes(4), 1).unwrap();
    let points: Vec<Point2> =
        (0..256).map(|i| Point2::new(-2.0 + 4.0 * (i % 16) as f64 / 15.0, -2.0 + 4.0 * (i / 16) as f64 / 15.0)).collect();
    let cfg = IntegratorConfig { rel_tol: 1e-8, abs_tol: 1e-10, ..Default::default() };
    let mut group = c.benchmark_group("integrate_batch");
    group.sample_size(10);
    for exec in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| integrate_batch_with(exec, black_box(&state), &points, 0.0, 1.0, &cfg))
        });
    }
    group.finish();
}

fn transport(c: &mut Criterion) {
    let state = Superposition::equal_weight_random_phase(Superposition::square_modes(3), 1).unwrap();
    let grid = GridSpec::new(4.0, 64, 0.5, Smoothing::None).unwrap();
    let cfg = IntegratorConfig { rel_tol: 1e-6, abs_tol: 1e-8, ..Default::default() };
    let rho0 = |q| InitialDensity::Gaussian { width: 1.0 }.eval(&state, q);
    let mut group = c.benchmark_group("transport_density");
    group.sample_size(10);
    for exec in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| transport_density_with(exec, black_box(&state), rho0, 1.0, &grid, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch, transport);
criterion_main!(benches);
