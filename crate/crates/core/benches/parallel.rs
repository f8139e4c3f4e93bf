//! Parallel core against the one-thread path on the hot kernels: operator
//! assembly, the impulse-response sweep and a full jet recovery.
//!
//! Build with `--no-default-features` for the purely sequential code path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fraclab_core::evolve::Equation;
use fraclab_core::fracop::FracOperator;
use fraclab_core::grid::TimeGrid;
use fraclab_core::inverse::{ImpulseResponses, InversionSetup};
use fraclab_core::par;
use fraclab_core::verify::{recovery_grid, run_recovery, RecoveryCase, RECOVERY_POINTS};

/// One worker against a full pool (at least four, so the comparison exists
/// even on small machines).
fn thread_counts() -> [usize; 2] {
    [1, par::threads().max(4)]
}

fn kernels(c: &mut Criterion) {
    let grid = recovery_grid(0.5, RECOVERY_POINTS).unwrap();
    let tg = TimeGrid::new(1.0, 64).unwrap();
    let mut group = c.benchmark_group("assemble");
    for n in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| par::with_threads(n, || FracOperator::assemble(&grid, 0.5).unwrap()))
        });
    }
    group.finish();

    let op = FracOperator::assemble(&grid, 0.5).unwrap();
    let setup = InversionSetup::new(&op, &tg, Equation::Heat).unwrap();
    let mut group = c.benchmark_group("impulse_responses");
    for n in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| par::with_threads(n, || ImpulseResponses::compute(&setup).unwrap()))
        });
    }
    group.finish();

    let case = RecoveryCase {
        equation: Equation::Heat,
        s: 0.5,
        order: 3,
        amplitude: 20.0,
        oracle_points: RECOVERY_POINTS,
    };
    let mut group = c.benchmark_group("recovery");
    group.sample_size(10);
    for n in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| par::with_threads(n, || run_recovery(&case).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
