mod common;

use arraycal::jacobian;
use arraycal::linalg::{self, RankPolicy};
use arraycal::observability::{self, DegenerateCase, GEOMETRY_TOL};
use arraycal::scenario::{Plane, Scenario};
use proptest::prelude::*;

fn codes(sc: &Scenario) -> Vec<&'static str> {
    observability::detect_degenerate(sc, GEOMETRY_TOL)
        .iter()
        .map(DegenerateCase::code)
        .collect()
}

fn deficit(sc: &Scenario) -> usize {
    let b = jacobian::assemble(sc).unwrap();
    b.layout.state_dim() - jacobian::jacobian_rank(&b, &RankPolicy::default())
}

fn plane_strategy() -> impl Strategy<Value = Plane> {
    (0usize..3, 0.3f64..2.0).prop_map(|(which, a)| match which {
        0 => Plane::XAlphaY(a),
        1 => Plane::XBetaZ(a),
        _ => Plane::YGammaZ(a),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn collinear_origin_is_detected_and_deficient(k in 5usize..=20, n in 2usize..=4, seed in 0u64..1000) {
        let sc = common::collinear_origin(n, k, seed);
        prop_assert!(codes(&sc).contains(&"collinear-origin"));
        prop_assert!(deficit(&sc) > 0);
    }

    #[test]
    fn planar_is_detected_and_deficient(k in 5usize..=20, n in 2usize..=4, plane in plane_strategy(), seed in 0u64..1000) {
        let sc = common::planar(n, k, plane, seed);
        let found = observability::detect_degenerate(&sc, GEOMETRY_TOL);
        let fit = found.iter().find_map(|d| match d {
            DegenerateCase::PlanarThroughOrigin(fit) => Some(fit.clone()),
            _ => None,
        });
        prop_assert!(fit.is_some(), "no planar case in {:?}", found);
        let family = fit.unwrap().family.unwrap();
        prop_assert_eq!(family.label(), plane.label());
        prop_assert!((family.coefficient() - plane.coefficient()).abs() < 1e-6);
        prop_assert!(deficit(&sc) > 0);
    }

    #[test]
    fn collinear_array_is_detected_and_deficient(k in 5usize..=20, n in 3usize..=5, seed in 0u64..1000) {
        let array = 2 + (seed as usize % (n - 1));
        let sc = common::collinear_array(n, k, array, seed);
        let found = observability::detect_degenerate(&sc, GEOMETRY_TOL);
        prop_assert!(found.iter().any(|d| matches!(d, DegenerateCase::CollinearWithArray { array: a, .. } if *a == array)), "{:?}", found);
        prop_assert!(deficit(&sc) > 0);
    }

    #[test]
    fn gimbal_is_detected_and_deficient(k in 5usize..=20, n in 2usize..=4, seed in 0u64..1000) {
        let array = 2 + (seed as usize % (n - 1));
        let sc = common::gimbal(n, k, array, seed);
        let found = observability::detect_degenerate(&sc, GEOMETRY_TOL);
        prop_assert!(found.iter().any(|d| matches!(d, DegenerateCase::GimbalLock { array: a } if *a == array)), "{:?}", found);
        prop_assert!(deficit(&sc) > 0);
    }

    #[test]
    fn observable_scenarios_are_clean(k in 5usize..=20, n in 2usize..=5, seed in 0u64..1000) {
        let sc = common::observable(n, k, seed);
        prop_assert!(codes(&sc).is_empty(), "{:?}", codes(&sc));
    }

    #[test]
    fn too_few_steps_is_always_deficient(k in 1usize..=4, n in 2usize..=6, seed in 0u64..1000) {
        let sc = common::observable(n, k, seed);
        prop_assert!(deficit(&sc) > 0);
        prop_assert!(codes(&sc).contains(&"too-few-steps"));
        let nec = observability::check_necessary(&sc, &RankPolicy::default()).unwrap();
        prop_assert!(nec.iter().any(|v| v.code() == "too-few-steps"));
    }

    #[test]
    fn full_rank_needs_all_necessary_conditions(k in 3usize..=12, n in 2usize..=4, seed in 0u64..1000) {
        let sc = common::observable(n, k, seed);
        let policy = RankPolicy::default();
        if deficit(&sc) == 0 {
            prop_assert!(observability::check_necessary(&sc, &policy).unwrap().is_empty());
        }
        if observability::check_sufficient(&sc, &policy).unwrap().sufficient() {
            prop_assert_eq!(deficit(&sc), 0);
        }
    }

    #[test]
    fn f_and_j_share_the_deficit(k in 1usize..=12, n in 2usize..=4, seed in 0u64..1000, degenerate in any::<bool>()) {
        let sc = if degenerate { common::collinear_origin(n, k, seed) } else { common::observable(n, k, seed) };
        let policy = RankPolicy::default();
        let report = observability::check(&sc, &policy).unwrap();
        let f_cols = observability::f_cols(n);
        prop_assert_eq!(report.g2 - report.rank_j, f_cols - report.rank_f);
        prop_assert_eq!(report.rank_f, report.rank_fbar_prime);
    }

    #[test]
    fn prefix_rank_of_f_never_drops(k in 2usize..=15, n in 2usize..=4, seed in 0u64..1000) {
        let sc = common::observable(n, k, seed);
        let report = observability::rank_trace(&sc, &RankPolicy::default()).unwrap();
        for w in report.trace.windows(2) {
            prop_assert!(w[1].rank_f >= w[0].rank_f);
        }
    }

    #[test]
    fn null_space_dimension_ignores_row_order(k in 5usize..=10, n in 2usize..=3, seed in 0u64..1000) {
        let sc = common::collinear_origin(n, k, seed);
        let j = jacobian::assemble(&sc).unwrap().j;
        let rows = j.nrows();
        let perm: Vec<usize> = (0..rows).map(|r| (r * 7 + seed as usize) % rows).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == rows });
        let permuted = j.select_rows(perm.iter());
        let policy = RankPolicy::default();
        prop_assert_eq!(linalg::numeric_rank(&j, &policy), linalg::numeric_rank(&permuted, &policy));
    }
}

#[test]
fn prefix_trace_matches_prefix_scenarios() {
    let sc = common::observable(3, 9, 5);
    let policy = RankPolicy::default();
    let report = observability::rank_trace(&sc, &policy).unwrap();
    assert_eq!(report.trace.len(), 9);
    for row in &report.trace {
        let prefix = sc.prefix(row.step).unwrap();
        assert_eq!(row.g2, 8 * 2 + 3 * row.step);
        assert_eq!(row.rank, row.g2 - deficit(&prefix), "step {}", row.step);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_plane_through_the_origin_is_deficient(
        nx in 0.2f64..1.0, ny in 0.2f64..1.0, nz in 0.2f64..1.0,
        k in 5usize..=15, seed in 0u64..1000,
    ) {
        use nalgebra::Vector3;
        let normal = Vector3::new(nx, ny, nz).normalize();
        let u = normal.cross(&Vector3::x()).normalize();
        let v = normal.cross(&u);
        let traj: Vec<_> = (0..k)
            .map(|i| {
                let t = i as f64;
                u * (1.0 + 0.3 * t) + v * (0.5 + 0.2 * (1.3 * t).sin())
            })
            .collect();
        let on = Scenario::new(common::arrays(3, seed), traj.clone(), 1.0, common::C, 0).unwrap();
        prop_assert!(codes(&on).contains(&"planar-origin"));
        prop_assert!(deficit(&on) > 0);

        let shifted: Vec<_> = traj.iter().map(|s| s + normal * 0.3).collect();
        let off = Scenario::new(common::arrays(3, seed), shifted, 1.0, common::C, 0).unwrap();
        prop_assert!(codes(&off).is_empty(), "{:?}", codes(&off));
        prop_assert_eq!(deficit(&off), 0);
    }
}
