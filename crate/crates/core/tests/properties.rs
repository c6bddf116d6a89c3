use std::collections::BTreeMap;

use mfbsde::applications::{antithetic, portfolio_foc_residual, portfolio_riccati, random_directions, Schedule};
use mfbsde::coefficients::example_3_2_reduced_gap;
use mfbsde::grid::{make_grid, MarkSpace, NoisePanel};
use mfbsde::monotonicity::{check_constants, MonotonicityData, Variant};
use mfbsde::registry::{self, Instance};
use mfbsde::report::{fmt17, read_table_csv, write_table_csv};
use proptest::prelude::*;

fn data(beta: f64, mu1: f64, c0: f64, l_a: f64, l_phi: f64) -> MonotonicityData {
    MonotonicityData {
        g: vec![vec![1.0]],
        beta1: beta,
        beta2: beta,
        beta3: beta,
        mu1,
        c0,
        lambda1: None,
        l_a,
        l_phi,
        l_f: 0.0,
        l_g: 0.0,
        horizon: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fmt17_round_trips_bit_exactly(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        let back: f64 = fmt17(x).parse().unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn csv_tables_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 3), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_table_csv(&path, &["a", "b", "c"], &rows).unwrap();
        let (header, back) = read_table_csv(&path).unwrap();
        prop_assert_eq!(header, vec!["a", "b", "c"]);
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn sampled_schedule_stays_within_its_values(
        values in proptest::collection::vec(-10.0f64..10.0, 2..8),
        t in -1.0f64..10.0,
    ) {
        let times: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
        let s = Schedule::sampled(times.clone(), values.clone()).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = s.at(t);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        for (ti, vi) in times.iter().zip(&values) {
            prop_assert_eq!(s.at(*ti), *vi);
        }
    }

    #[test]
    fn certificate_survives_larger_monotonicity_constants(
        beta in 0.0f64..5.0, mu1 in 0.0f64..5.0, c0 in 0.0f64..2.0,
        l_a in 0.0f64..2.0, l_phi in 0.0f64..2.0, bump in 0.0f64..3.0,
    ) {
        let base = check_constants(&data(beta, mu1, c0, l_a, l_phi), Variant::H32);
        let bigger = check_constants(&data(beta + bump, mu1 + bump, c0, l_a, l_phi), Variant::H32);
        prop_assert_eq!(base.margin.len(), 4);
        for (a, b) in base.margin.iter().zip(&bigger.margin) {
            prop_assert!(b >= a);
        }
        if base.pass && bump > 0.0 {
            prop_assert!(bigger.pass);
        }
    }

    #[test]
    fn certificate_is_invariant_under_common_scaling(
        beta in 0.1f64..5.0, mu1 in 0.1f64..5.0, c0 in 0.1f64..2.0, l_a in 0.1f64..2.0, s in 0.1f64..10.0,
    ) {
        // scaling β, μ₁ and L_A, L_Φ together scales every margin
        let a = check_constants(&data(beta, mu1, c0, l_a, 1.0), Variant::H32);
        let b = check_constants(&data(s * beta, s * mu1, c0, s * l_a, s), Variant::H32);
        prop_assert_eq!(a.condition_set, b.condition_set);
        for (u, v) in a.margin.iter().zip(&b.margin) {
            prop_assert!((s * u - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn reduced_gap_never_vanishes_at_three_quarter_pi(c in -100.0f64..100.0) {
        let g = example_3_2_reduced_gap(0.75 * std::f64::consts::PI, c);
        prop_assert!((g.abs() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn portfolio_first_order_condition_holds_for_any_market(
        rho in 0.0f64..0.1, excess in -0.2f64..0.2, sigma in 0.05f64..0.6, eta in -0.3f64..0.3,
        lambda in 0.0f64..3.0, a in 0.5f64..3.0, t in 0.0f64..1.0, x in -5.0f64..5.0,
    ) {
        let mut p = registry::portfolio();
        p.rho = rho.into();
        p.mu = (rho + excess).into();
        p.sigma = sigma.into();
        p.eta = vec![eta.into()];
        p.intensity = vec![lambda];
        p.a = a;
        let grid = make_grid(1.0, 200).unwrap();
        let sol = portfolio_riccati(&p, &grid).unwrap();
        let r = portfolio_foc_residual(&sol, &p, t, x).unwrap();
        prop_assert!(r.abs() <= 1e-10 * (1.0 + x.abs()), "residual {r}");
    }

    #[test]
    fn noise_panels_depend_only_on_the_seed(seed in 0u64..1000, particles in 2usize..20) {
        let g = make_grid(0.5, 5).unwrap();
        let marks = MarkSpace::single(1.0, 2.0).unwrap();
        let a = NoisePanel::generate(&g, &marks, particles, 1, seed).unwrap();
        let b = NoisePanel::generate(&g, &marks, particles, 1, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn antithetic_pairs_cancel(seed in 0u64..500, t in 0.0f64..1.0) {
        let dirs = random_directions(3, 1.0, seed);
        let all = antithetic(&dirs);
        prop_assert_eq!(all.len(), 6);
        for k in 0..3 {
            let (mut u, mut v) = ([0.0], [0.0]);
            all[k].eval(0, 0, t, &[0.0], &mut u);
            all[k + 3].eval(0, 0, t, &[0.0], &mut v);
            prop_assert!((u[0] + v[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn registry_overrides_are_applied(a in -1.0f64..1.0, horizon in 0.1f64..2.0) {
        let mut o = BTreeMap::new();
        o.insert("a".to_string(), serde_json::json!(a));
        o.insert("horizon".to_string(), serde_json::json!(horizon));
        match registry::lookup("lq", &o).unwrap() {
            Instance::Lq { params, horizon: h } => {
                prop_assert_eq!(params.a, a);
                prop_assert_eq!(h, horizon);
            }
            _ => prop_assert!(false, "wrong instance"),
        }
    }
}
