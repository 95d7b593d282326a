use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use sfe_core::functionals::solve_heat_system;
use sfe_core::hpath::DriftField;
use sfe_core::measure::{make_grid, Density};
use sfe_core::moment::fixed_point_step;
use sfe_core::solver::SolveOptions;

fn pair(d: usize, n: usize) -> (Density, Density) {
    let g = Arc::new(make_grid(d, 3.0, n).unwrap());
    let p0 = Density::from_fn(g.clone(), |x| (-x.iter().map(|v| (v + 0.5).powi(2)).sum::<f64>()).exp()).unwrap();
    let p1 = Density::from_fn(g, |x| (-2.0 * x.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>()).exp()).unwrap();
    (p0, p1)
}

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("heat_solve");
    group.sample_size(10);
    for n in [100, 400] {
        let (p0, p1) = pair(1, n);
        let opts = SolveOptions::with_tol(1e-10, 100_000);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve_heat_system(&p0, &p1, 0.25, &opts).unwrap())
        });
    }
    group.finish();
}

fn drift(c: &mut Criterion) {
    let (p0, p1) = pair(2, 30);
    let sol = solve_heat_system(&p0, &p1, 0.5, &SolveOptions::with_tol(1e-10, 100_000)).unwrap();
    let field = DriftField::new(&sol, 0.5).unwrap();
    let mut out = vec![0.0; 2];
    let mut scratch = Vec::new();
    c.bench_function("drift_eval_2d", |b| {
        b.iter(|| field.eval_into(black_box(0.5), black_box(&[0.1, -0.2]), &mut out, &mut scratch))
    });
}

fn moment_step(c: &mut Criterion) {
    let g = Arc::new(make_grid(1, 4.0, 201).unwrap());
    let p1 = Density::from_fn(g.clone(), |x| (-0.5 * x[0] * x[0]).exp()).unwrap();
    let p = Density::from_fn(g, |_| 1.0).unwrap();
    let mut group = c.benchmark_group("fixed_point_step");
    group.sample_size(10);
    group.bench_function("gaussian_201", |b| b.iter(|| fixed_point_step(&p, &p1, 0.125, 4.0).unwrap()));
    group.finish();
}

criterion_group!(benches, solver, drift, moment_step);
criterion_main!(benches);
