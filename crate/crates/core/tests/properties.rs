use std::sync::Arc;

use proptest::prelude::*;
use splap_core::measure_lab::{
    arc_boxes, axis_project, cover_length, verify_null_projection, BoxSet, IntervalCover, LipschitzMap,
};
use splap_core::mesh_fem::{
    build_mesh, distance_field, hardy_quotient, integrate_singular, unit_square, DiscreteField, FemSpace,
};
use splap_core::plap_core::{apply_plap_residual, first_eigenpair, first_eigenpair_from, PlapConfig};
use splap_core::problem_def::{coercivity_margin, default_radii_at, envelopes_at, estimate_lf, NonlinearitySpec};

fn jump_f() -> NonlinearitySpec {
    let mut cfg = splap_core::cli_io::RunConfig::demo();
    cfg.f.bind("p", 1.5);
    cfg.f
}

fn l_shape_space(h: f64) -> Arc<FemSpace> {
    let poly = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.5, 0.5], [0.5, 1.0], [0.0, 1.0]];
    FemSpace::new(Arc::new(build_mesh(&poly, h).unwrap())).unwrap()
}

fn square_space(h: f64) -> Arc<FemSpace> {
    FemSpace::new(Arc::new(build_mesh(&unit_square(), h).unwrap())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn envelopes_are_ordered_and_nonnegative(s in 0.01f64..3.0) {
        let f = jump_f();
        let e = envelopes_at(&f, &[s], &default_radii_at(&f, &[s])).unwrap();
        prop_assert!(e.lower <= e.upper);
        prop_assert!(e.lower >= 0.0);
        if (s - 0.1).abs() > 0.5 * s.min(1.0) {
            let v = f.eval_scalar(s);
            prop_assert!((e.lower - v).abs() <= 1e-9 * v.max(1.0), "{} vs {v}", e.lower);
            prop_assert!((e.upper - v).abs() <= 1e-9 * v.max(1.0), "{} vs {v}", e.upper);
        }
    }

    #[test]
    fn margin_is_affine_in_sigma(
        lf in 0.0f64..5.0, lg in 0.0f64..5.0, lambda in 1.0f64..50.0, p in 1.05f64..1.95, sigma in 0.0f64..3.0,
    ) {
        let slope = 1.0 / lambda + 1.0 / lambda.powf(1.0 / p);
        let m0 = coercivity_margin(lf, lg, lambda, p, 0.0);
        let m = coercivity_margin(lf, lg, lambda, p, sigma);
        prop_assert!((m - (m0 - slope * sigma)).abs() <= 1e-12);
    }

    #[test]
    fn distance_is_one_lipschitz(a in (0.0f64..1.0, 0.0f64..1.0), b in (0.0f64..1.0, 0.0f64..1.0)) {
        let sp = l_shape_space(0.125);
        let d = distance_field(sp.mesh());
        let inside = |x: (f64, f64)| !(x.0 > 0.5 && x.1 > 0.5);
        prop_assume!(inside(a) && inside(b));
        let (pa, pb) = ([a.0, a.1], [b.0, b.1]);
        let gap = (a.0 - b.0).hypot(a.1 - b.1);
        prop_assert!((d.eval(pa) - d.eval(pb)).abs() <= gap + 1e-12);
    }

    #[test]
    fn cover_length_is_monotone_and_subadditive(
        a in prop::collection::vec((-5.0f64..5.0, 0.0f64..2.0), 1..8),
        b in prop::collection::vec((-5.0f64..5.0, 0.0f64..2.0), 1..8),
    ) {
        let ia: Vec<(f64, f64)> = a.iter().map(|&(x, w)| (x, x + w)).collect();
        let ib: Vec<(f64, f64)> = b.iter().map(|&(x, w)| (x, x + w)).collect();
        let both: Vec<(f64, f64)> = ia.iter().chain(&ib).copied().collect();
        let (la, lb) = (cover_length(&IntervalCover::new(ia)), cover_length(&IntervalCover::new(ib)));
        let lu = cover_length(&IntervalCover::new(both));
        prop_assert!(lu + 1e-12 >= la.max(lb));
        prop_assert!(lu <= la + lb + 1e-12);
    }

    #[test]
    fn projection_commutes_with_union(
        a in prop::collection::vec((-3.0f64..3.0, 0.0f64..1.0, -3.0f64..3.0, 0.0f64..1.0), 1..5),
        b in prop::collection::vec((-3.0f64..3.0, 0.0f64..1.0, -3.0f64..3.0, 0.0f64..1.0), 1..5),
        axis in 1usize..3,
    ) {
        let boxes = |v: &[(f64, f64, f64, f64)]| {
            BoxSet::new(2, v.iter().map(|&(x, w, y, h)| vec![(x, x + w), (y, y + h)]).collect()).unwrap()
        };
        let (sa, sb) = (boxes(&a), boxes(&b));
        let whole = axis_project(&sa.union(&sb).unwrap(), axis).unwrap();
        let pa = axis_project(&sa, axis).unwrap();
        let pb = axis_project(&sb, axis).unwrap();
        let joined = IntervalCover::new(pa.intervals().iter().chain(pb.intervals()).copied().collect());
        prop_assert_eq!(whole.merged(), joined.merged());
    }

    #[test]
    fn hardy_quotient_is_scale_invariant(c in 0.01f64..100.0) {
        let sp = square_space(0.25);
        let d = distance_field(sp.mesh());
        let u = DiscreteField::interpolate(&sp, |x| x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]));
        let q1 = hardy_quotient(&u, &d, 0.5, 1.5).unwrap();
        let qc = hardy_quotient(&u.scaled(c), &d, 0.5, 1.5).unwrap();
        prop_assert!((q1 - qc).abs() <= 1e-10 * q1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn p_laplacian_is_monotone(
        seed in prop::collection::vec(-1.0f64..1.0, 50),
        p in 1.1f64..3.0,
        tau in 0.0f64..0.1,
    ) {
        let sp = square_space(0.25);
        let tau = if tau == 0.0 { 1e-12 } else { tau };
        let n = sp.n_dofs();
        let u = DiscreteField::from_interior(&sp, &seed[..n]);
        let v = DiscreteField::from_interior(&sp, &seed[n..2 * n]);
        let zero = vec![0.0; n];
        let au = apply_plap_residual(&u, &zero, p, tau).unwrap();
        let av = apply_plap_residual(&v, &zero, p, tau).unwrap();
        let (ui, vi) = (u.interior_values(), v.interior_values());
        let pairing: f64 = (0..n).map(|i| (au[i] - av[i]) * (ui[i] - vi[i])).sum();
        prop_assert!(pairing >= -1e-12, "{pairing}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn growth_estimate_scales_with_f(c in prop::sample::select(vec![2.0, 10.0])) {
        let f = jump_f();
        let (lf, _) = estimate_lf(&f, 1.5);
        let (lc, _) = estimate_lf(&f.scaled(c), 1.5);
        prop_assert!((lc - c * lf).abs() <= 4.0 * f64::EPSILON * lc, "{lc} vs {}", c * lf);
    }

    #[test]
    fn eigenpair_ignores_initial_scale(c in 0.05f64..20.0) {
        let sp = square_space(0.125);
        let cfg = PlapConfig::new(1.5);
        let base = first_eigenpair(&cfg, &sp).unwrap();
        let init = DiscreteField::interpolate(&sp, |x| c * x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]));
        let other = first_eigenpair_from(&cfg, &init).unwrap();
        prop_assert!((base.lambda1 - other.lambda1).abs() <= 1e-10 * base.lambda1);
        let interior_min = sp.interior().iter().map(|&v| other.phi1.values()[v]).fold(f64::INFINITY, f64::min);
        prop_assert!(interior_min > 0.0);
    }
}

#[test]
fn singular_integral_grows_with_gamma() {
    let mesh = build_mesh(&unit_square(), 0.5).unwrap();
    let values: Vec<f64> = [0.1, 0.2, 0.3, 0.4]
        .iter()
        .map(|&g| integrate_singular(&mesh, g, 2.0).unwrap().value().expect("finite"))
        .collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
}

#[test]
fn halving_boxes_and_epsilon_halves_the_bound() {
    let psi = LipschitzMap::power_map(1.5, 2, (0.5, 2.0), 20_000, 11).unwrap();
    let run = |side: f64, eps: f64| {
        let r = verify_null_projection(&psi, &arc_boxes(16, side, 1.0), eps).unwrap();
        r.achieved.iter().sum::<f64>()
    };
    let (big, small) = (run(2e-5, 4e-3), run(1e-5, 2e-3));
    let ratio = small / big;
    assert!((ratio - 0.5).abs() <= 0.15 * 0.5, "{ratio}");
}
