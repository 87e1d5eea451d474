use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use splap_core::cli_io::RunConfig;
use splap_core::measure_lab::{arc_boxes, verify_null_projection, LipschitzMap};
use splap_core::mesh_fem::{build_mesh, unit_square, DiscreteField, FemSpace};
use splap_core::plap_core::{apply_plap_residual, first_eigenpair, PlapConfig};
use splap_core::problem_def::{ball_envelope, default_radii_at, envelopes_at};
use splap_core::regularization::{truncate_f, RegularizedReactions};

fn space(h: f64) -> Arc<FemSpace> {
    FemSpace::new(Arc::new(build_mesh(&unit_square(), h).unwrap())).unwrap()
}

fn mesh_and_operator(c: &mut Criterion) {
    c.bench_function("build_mesh h=1/64", |b| b.iter(|| build_mesh(&unit_square(), black_box(1.0 / 64.0)).unwrap()));
    let sp = space(1.0 / 64.0);
    let u = DiscreteField::interpolate(&sp, |x| x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]));
    let zero = vec![0.0; sp.n_dofs()];
    c.bench_function("p-Laplace residual h=1/64", |b| {
        b.iter(|| apply_plap_residual(black_box(&u), &zero, 1.5, 1e-8).unwrap())
    });
    let sp16 = space(1.0 / 16.0);
    c.bench_function("first eigenpair p=1.5 h=1/16", |b| {
        b.iter(|| first_eigenpair(&PlapConfig::new(1.5), &sp16).unwrap())
    });
}

fn reactions(c: &mut Criterion) {
    let mut cfg = RunConfig::demo();
    cfg.f.bind("p", cfg.p);
    let (f, g) = (cfg.f, cfg.g);
    c.bench_function("ball envelope at the jump", |b| b.iter(|| ball_envelope(&f, &[black_box(0.1)], 1e-3).unwrap()));
    c.bench_function("limit envelopes at the jump", |b| {
        b.iter(|| envelopes_at(&f, &[black_box(0.1)], &default_radii_at(&f, &[0.1])).unwrap())
    });
    let sp = space(1.0 / 16.0);
    let floor = DiscreteField::interpolate(&sp, |x| 0.01 * x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]));
    let rr = RegularizedReactions::new(truncate_f(&f, &floor).unwrap(), g.clone(), 5e-3).unwrap();
    c.bench_function("mollified f", |b| b.iter(|| rr.f_eps(0.004, black_box(0.1))));
    c.bench_function("mollified g", |b| b.iter(|| rr.g_eps(black_box(&[0.001, -0.002]))));
}

fn measure(c: &mut Criterion) {
    let psi = LipschitzMap::power_map(1.5, 2, (0.5, 2.0), 20_000, 7).unwrap();
    let d = arc_boxes(16, 1e-6, 1.0);
    c.bench_function("null projection 16 boxes", |b| {
        b.iter(|| verify_null_projection(&psi, &d, black_box(1e-3)).unwrap())
    });
}

criterion_group!(benches, mesh_and_operator, reactions, measure);
criterion_main!(benches);
