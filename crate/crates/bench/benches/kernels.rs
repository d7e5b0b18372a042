use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_complex::Complex64;

use unitflow::grid::laplacian;
use unitflow::harness::{initial_field, preset};
use unitflow::integrators::make_stepper;
use unitflow::linalg::solve;
use unitflow::stability::{embed, sample_region, stability_function_embedded, RegionSpec};
use unitflow::{prk2_tableau, Grid, Scheme, SolverConfig, SolverMethod, SparseOperator};

fn laplacian_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("laplacian");
    for k in [32, 64, 128] {
        let grid = Grid::neumann(2, k, 0.0, 1.0).unwrap();
        g.bench_with_input(BenchmarkId::new("assemble_2d", k), &grid, |b, grid| {
            b.iter(|| laplacian(black_box(grid)))
        });
        let lap = laplacian(&grid);
        let u: Vec<f64> = (0..grid.n_nodes()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut out = vec![0.0; u.len()];
        g.bench_with_input(BenchmarkId::new("apply_2d", k), &u, |b, u| {
            b.iter(|| lap.apply_scalar(black_box(u), &mut out))
        });
    }
    g.finish();
}

/// `I - tau D_h` on a Neumann grid.
fn implicit_matrix(grid: &Grid, tau: f64) -> SparseOperator {
    let m = laplacian(grid).scaled_matrix();
    let n = m.n_rows();
    let mut trip = Vec::with_capacity(m.nnz() + n);
    for i in 0..n {
        trip.push((i, i, 1.0));
        let (cols, vals) = m.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            trip.push((i, j, -tau * v));
        }
    }
    SparseOperator::from_triplets(n, n, &trip)
}

fn stage_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("stage_solve");
    let grid = Grid::neumann(2, 64, 0.0, 1.0).unwrap();
    let a = implicit_matrix(&grid, 1e-4);
    let rhs: Vec<f64> = (0..a.n_rows()).map(|i| (i as f64 * 0.11).cos()).collect();
    let methods = [
        ("bicgstab", SolverMethod::BiCgStab),
        ("gmres30", SolverMethod::Gmres { restart: 30 }),
        ("banded", SolverMethod::BandedDirect),
    ];
    for (name, method) in methods {
        let cfg = SolverConfig { method, ..SolverConfig::default() };
        g.bench_function(name, |b| b.iter(|| solve(&a, black_box(&rhs), &cfg).unwrap()));
    }
    g.finish();
}

fn scheme_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("step_k64");
    g.sample_size(20);
    let mut cfg = preset("convergence41").unwrap();
    cfg.grid.k = 64;
    let problem = cfg.problem().unwrap();
    let m0 = initial_field(&cfg, &problem).unwrap();
    for (name, scheme) in [("prk2", Scheme::prk2()), ("prk_alt", Scheme::prk2_alt()), ("sip1", Scheme::sip1(1.0))] {
        let mut params = cfg.params.clone();
        params.scheme = scheme;
        params.tau = 1e-4;
        let mut stepper = make_stepper(&problem, &params, &m0).unwrap();
        g.bench_function(name, |b| b.iter(|| stepper.step(black_box(&m0)).unwrap()));
    }
    g.finish();
}

fn stability(c: &mut Criterion) {
    let t = prk2_tableau();
    let e = embed(&t);
    let z = Complex64::new(-1.5, 0.75);
    c.bench_function("stability_function", |b| {
        b.iter(|| stability_function_embedded(&e, black_box(z), black_box(z * 0.5), black_box(-z)).unwrap())
    });
    let mut spec = RegionSpec::figure_preset();
    spec.nx = 64;
    spec.ny = 64;
    let mut g = c.benchmark_group("stability_region");
    g.sample_size(10);
    g.bench_function("64x64", |b| b.iter(|| sample_region(&t, black_box(&spec)).unwrap()));
    g.finish();
}

criterion_group!(benches, laplacian_kernels, stage_solve, scheme_steps, stability);
criterion_main!(benches);
