//! Throughput of the hot kernels: RLS updates, random projection and the
//! LOOCV spectral solve.

use std::hint::black_box;

use anacil_core::analytic::{ridge_fit, AnalyticState, OneHot};
use anacil_core::buffer::{GaussianStream, ProjectionBuffer};
use anacil_core::lambda::{LambdaGrid, LooSolver};
use anacil_core::rigidity::gaussian_matrix;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn targets(n: usize, c: usize) -> OneHot {
    OneHot::new((0..n).map(|i| i % c).collect(), c).unwrap()
}

fn rls_update(c: &mut Criterion) {
    let mut group = c.benchmark_group("rls_update");
    group.sample_size(10);
    for (dim, rows) in [(512, 64), (1024, 256), (2048, 512)] {
        let features = gaussian_matrix(&mut GaussianStream::new(1), rows, dim);
        let y = targets(rows, 100);
        let state = AnalyticState::new(dim, 100, 1e-2).unwrap();
        group.throughput(Throughput::Elements(rows as u64));
        group.bench_with_input(BenchmarkId::new(format!("d{dim}"), rows), &rows, |b, _| {
            b.iter_batched(
                || state.clone(),
                |mut s| {
                    s.rls_update(black_box(&features), &y).unwrap();
                    s
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn projection(c: &mut Criterion) {
    let mut group = c.benchmark_group("projection");
    for (input, width) in [(1280, 2048), (1280, 8192)] {
        let buffer = ProjectionBuffer::new(7, input, width).unwrap();
        let rows = gaussian_matrix(&mut GaussianStream::new(2), 32, input);
        group.throughput(Throughput::Elements(32));
        group.bench_function(BenchmarkId::new(format!("in{input}"), width), |b| {
            b.iter(|| buffer.project_matrix(black_box(&rows)).unwrap())
        });
    }
    group.finish();
}

fn loocv(c: &mut Criterion) {
    let mut group = c.benchmark_group("loocv");
    group.sample_size(10);
    for (n, dim) in [(400, 1024), (1024, 512)] {
        let features = gaussian_matrix(&mut GaussianStream::new(3), n, dim);
        let y = targets(n, 50);
        group.bench_function(BenchmarkId::new("factorize", format!("{n}x{dim}")), |b| {
            b.iter(|| LooSolver::new(black_box(&features), &y).unwrap())
        });
        let solver = LooSolver::new(&features, &y).unwrap();
        let grid = LambdaGrid::default();
        group.bench_function(BenchmarkId::new("score_grid", format!("{n}x{dim}")), |b| {
            b.iter(|| {
                for &l in grid.candidates() {
                    black_box(solver.score(l).unwrap());
                }
            })
        });
        group.bench_function(BenchmarkId::new("ridge_fit", format!("{n}x{dim}")), |b| {
            b.iter(|| ridge_fit(black_box(&features), &y, 1e-2).unwrap())
        });
    }
    group.finish();
}

criterion_group!(kernels, rls_update, projection, loocv);
criterion_main!(kernels);
