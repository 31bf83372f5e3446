//! Benchmarks of the data-parallel hot paths against a one-thread rayon
//! pool. Building with `--no-default-features` exercises the genuinely
//! sequential fallback instead.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::sync::Arc;

use reportcard::posterior::{pairwise_matrices, UnitPosterior};
use reportcard::solver::{assemble_objective, solve, SolveMode, SolveOptions};

fn synthetic_posteriors(n: usize, m: usize) -> Vec<UnitPosterior> {
    let grid: Arc<Vec<f64>> = Arc::new((0..m).map(|i| i as f64 / (m - 1) as f64).collect());
    (0..n)
        .map(|u| {
            let center = 0.2 + 0.6 * (u as f64 / n as f64);
            let sd = 0.05 + 0.001 * (u % 7) as f64;
            let mut w: Vec<f64> = grid
                .iter()
                .map(|x| (-0.5 * ((x - center) / sd).powi(2)).exp())
                .collect();
            let total: f64 = w.iter().sum();
            for v in w.iter_mut() {
                *v /= total;
            }
            UnitPosterior {
                id: format!("u{u}"),
                grid: grid.clone(),
                weights: w,
                scale: 1.0 + 0.002 * (u % 5) as f64,
            }
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn with_one_thread<T>(f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_one_thread<T>(f: impl FnOnce() -> T) -> T {
    f()
}

fn bench_pairwise(c: &mut Criterion) {
    let posts = synthetic_posteriors(64, 600);
    let mut group = c.benchmark_group("pairwise_matrices");
    group.bench_function("default_pool", |b| {
        b.iter(|| pairwise_matrices(std::hint::black_box(&posts), 2))
    });
    group.bench_function("one_thread", |b| {
        b.iter(|| with_one_thread(|| pairwise_matrices(std::hint::black_box(&posts), 2)))
    });
    group.finish();
}

fn bench_solve(c: &mut Criterion) {
    let posts = synthetic_posteriors(60, 200);
    let matrices = pairwise_matrices(&posts, 0);
    let spec = assemble_objective(&matrices, 0.25);
    let opts = SolveOptions {
        mode: SolveMode::Heuristic,
        restarts: 32,
        ..SolveOptions::default()
    };
    let mut group = c.benchmark_group("heuristic_solve");
    group.sample_size(10);
    group.bench_function("default_pool", |b| {
        b.iter_batched(|| spec.clone(), |s| solve(&s, &opts), BatchSize::LargeInput)
    });
    group.bench_function("one_thread", |b| {
        b.iter_batched(
            || spec.clone(),
            |s| with_one_thread(|| solve(&s, &opts)),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_pairwise, bench_solve);
criterion_main!(benches);
