use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmdg_bench::EulerFixture;
use mmdg_core::limiter::{Limiter, LimiterParams, TroubleFlags, TroubleReason};
use mmdg_core::mmpde::mesh_velocities;

fn weak_residual(c: &mut Criterion) {
    let mut g = c.benchmark_group("weak_residual");
    for k in [1, 2] {
        let f = EulerFixture::new(16, k);
        g.bench_with_input(BenchmarkId::new("euler2d_16x16", k), &f, |b, f| {
            b.iter(|| f.dg.weak_residual(&f.mesh, &f.stage, black_box(&f.state), &f.law, &f.bc).unwrap())
        });
    }
    g.finish();
}

fn limiter(c: &mut Criterion) {
    let mut g = c.benchmark_group("limiter");
    for k in [1, 2] {
        let f = EulerFixture::new(16, k);
        // Flag everything so the reconstruction itself is timed.
        let flags = TroubleFlags {
            reasons: vec![Some(TroubleReason::Minmod); f.mesh.n_elements()],
        };
        g.bench_with_input(BenchmarkId::new("all_cells_euler2d_16x16", k), &f, |b, f| {
            let mut lim = Limiter::new(&f.dg, &f.law, LimiterParams::default());
            b.iter(|| lim.limit_flagged(&f.mesh, &f.stage, black_box(&f.state), &flags))
        });
    }
    g.finish();
}

fn mesh_equation(c: &mut Criterion) {
    let f = EulerFixture::new(16, 1);
    let x = f.mesh.coords().to_vec();
    c.bench_function("mesh_velocities_16x16", |b| {
        b.iter(|| mesh_velocities(&f.mesh, black_box(&x), &x, &f.metric, 1e-2).unwrap())
    });
}

criterion_group!(benches, weak_residual, limiter, mesh_equation);
criterion_main!(benches);
