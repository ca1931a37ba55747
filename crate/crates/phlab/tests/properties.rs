use approx::assert_abs_diff_eq;
use phlab::degree::{boundary_hypotheses_check, degree_fixed_point, AdmissibleMap, BoxDomain};
use phlab::geometry::{exp_map, log_map, torus_distance, wrap_signed, Point3, Vec3};
use phlab::harness::ExperimentConfig;
use phlab::perturbation::{flow, flow_lift, FlowParams, VectorFieldSpec};
use phlab::splitting::center_orientation_transport;
use phlab::systems::{catalog, MapSpec};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point3> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c)| Point3::xyz(a, b, c))
}

fn small() -> impl Strategy<Value = Vec3> {
    (-0.49..0.49f64, -0.49..0.49f64, -0.49..0.49f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exp_log_round_trip(x in point(), v in small()) {
        let y = exp_map(&x, &v);
        let back = log_map(&x, &y);
        prop_assert!((back - v).amax() < 1e-15);
    }

    #[test]
    fn distance_is_a_metric(x in point(), y in point(), z in point()) {
        let (dxy, dyx) = (torus_distance(&x, &y), torus_distance(&y, &x));
        prop_assert!((dxy - dyx).abs() < 1e-15);
        prop_assert!(torus_distance(&x, &z) <= dxy + torus_distance(&y, &z) + 1e-15);
        prop_assert!(torus_distance(&x, &x) == 0.0);
    }

    #[test]
    fn eval_inverse_round_trip(x in point(), which in 0usize..3) {
        let f = catalog()[which].instance();
        prop_assert!(torus_distance(&f.inverse(&f.eval(&x)), &x) < 1e-12);
        prop_assert!(torus_distance(&f.eval(&f.inverse(&x)), &x) < 1e-12);
    }

    #[test]
    fn vertical_vector_is_preserved(x in point(), which in 0usize..3) {
        let f = catalog()[which].instance();
        let dv = f.jacobian(&x) * Vec3::z();
        prop_assert_eq!(dv, Vec3::z() * f.fiber_sign());
    }

    #[test]
    fn flow_group_property(x in point(), t1 in -0.05..0.05f64, t2 in -0.05..0.05f64, alpha in 0.0..0.5f64) {
        let field = VectorFieldSpec::tilted(alpha);
        let a = flow(&field, t2, &flow(&field, t1, &x));
        let b = flow(&field, t1 + t2, &x);
        prop_assert!(torus_distance(&a, &b) < 1e-10);
    }

    #[test]
    fn flow_displacement_bound(x in point(), tau in -0.1..0.1f64, alpha in 0.0..0.5f64) {
        let field = VectorFieldSpec::tilted(alpha);
        let d = torus_distance(&x, &flow(&field, tau, &x));
        prop_assert!(d <= field.sup_norm() * tau.abs() * (1.0 + 1e-6) + 1e-15);
    }

    #[test]
    fn fiber_rotation_is_exact(x in point(), tau in -0.2..0.2f64) {
        let v = flow_lift(&VectorFieldSpec::vertical(), tau, &x.coords, FlowParams::for_tau(tau));
        prop_assert!((v[2] - x.coords[2] - tau).abs() < 1e-13);
        prop_assert_eq!(v[0], x.coords[0]);
    }

    #[test]
    fn admissible_maps_pass_the_hypotheses(seed in any::<u64>(), s in 1usize..=2) {
        let dom = BoxDomain::new(-1.0, 1.0, s).unwrap();
        let m = AdmissibleMap::random(dom, seed);
        let h = |t: f64, v: [f64; 2]| m.eval(t, v);
        prop_assert!(boundary_hypotheses_check(&h, &dom, 256, 0.0).pass);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), eps in 0.0..0.2f64, n in proptest::collection::vec(1usize..100, 1..5)) {
        let mut cfg = ExperimentConfig::parse(
            r#"{"version":1,"kind":"close_global","system":{"id":"skew"},"seed":0,
                "tolerances":{"splitting":1e-8},"target":[0.1,0.2,0.3],"n":[5]}"#,
        ).unwrap();
        cfg.seed = seed;
        cfg.system = MapSpec::skew(eps);
        cfg.n = n;
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn orientation_cocycle_is_multiplicative(x in point(), j in 1usize..4, k in 1usize..4, which in 0usize..3) {
        let f = catalog()[which].instance();
        let whole = center_orientation_transport(&f, &x, j + k).unwrap();
        let split = center_orientation_transport(&f, &x, j).unwrap()
            * center_orientation_transport(&f, &f.iterate(&x, j), k).unwrap();
        prop_assert_eq!(whole, split);
    }

    #[test]
    fn degree_fixed_points_are_reverified(seed in any::<u64>(), s in 1usize..=2) {
        let dom = BoxDomain::new(-0.5, 0.7, s).unwrap();
        let m = AdmissibleMap::random(dom, seed);
        let h = |t: f64, v: [f64; 2]| m.eval(t, v);
        let fp = degree_fixed_point(&h, &dom, 1e-12).unwrap();
        let (t, v) = m.eval(fp.t, fp.v);
        let r = ((t - fp.t).powi(2) + (v[0] - fp.v[0]).powi(2) + (v[1] - fp.v[1]).powi(2)).sqrt();
        prop_assert!(r < 1e-6);
        prop_assert_eq!(fp.initial_degree, 1);
    }
}

#[test]
fn wrap_signed_range() {
    for a in [-2.5, -0.5, 0.0, 0.49, 0.5, 1.75] {
        let w = wrap_signed(a);
        assert!((-0.5..0.5).contains(&w) || w == 0.5);
        assert_abs_diff_eq!(((a - w) - (a - w).round()), 0.0, epsilon = 1e-15);
    }
}
