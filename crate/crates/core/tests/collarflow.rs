use std::f64::consts::PI;

use proptest::prelude::*;
use tmflow_core::collarflow::*;
use tmflow_core::field::SphereMapField;
use tmflow_core::hypgeom::{collar_half_length, collar_table};

fn coarse(initial: CollarInitial) -> CollarConfig {
    CollarConfig { n_s: 121, n_theta: 16, initial, ..CollarConfig::default() }
}

#[test]
fn pinching_preset_stops_pinched_before_max_time() {
    let cfg = coarse(CollarConfig::default().initial);
    let r = run_collar(&cfg).unwrap();
    assert_eq!(r.status, CollarStop::Pinched);
    assert!(r.final_state.time < cfg.big_t);
    assert!(r.final_state.ell <= cfg.pinch_ratio * cfg.ell0 * (1.0 + 1e-12));
    assert!(r.history.windows(2).all(|w| w[1].t > w[0].t && w[1].a < w[0].a));
}

#[test]
fn tension_margin_is_nonnegative_on_regression_runs() {
    for initial in [
        CollarInitial::Bubble { center: 1.0, twist: 0.05 },
        CollarInitial::Interpolate { angle: 2.0, wiggle: 0.5 },
        CollarInitial::EquatorWrap,
    ] {
        let r = run_collar(&coarse(initial)).unwrap();
        assert!(r.collar.iter().all(|s| s.margin >= -1e-12));
    }
}

#[test]
fn thin_energy_grows_with_the_threshold() {
    let cfg = coarse(CollarInitial::Interpolate { angle: PI / 2.0, wiggle: 0.3 });
    let grid = cfg.grid().unwrap();
    let u = cfg.initial.build(&grid, 2).unwrap();
    let total = flat_energy(&u, &grid).unwrap();
    let mut prev = 0.0;
    for delta in [0.05, 0.1, 0.2, 0.4, 0.5] {
        let e = thin_part_energy(&u, &grid, cfg.ell0, delta).unwrap();
        assert!(e >= prev && e <= total * (1.0 + 1e-12));
        prev = e;
    }
    assert_eq!(thin_part_energy(&u, &grid, cfg.ell0, 0.05).unwrap(), 0.0);
}

#[test]
fn table_rows_follow_the_identity() {
    let rows = collar_table(&[0.01, 0.1, 0.5, 1.0], &[0.01, 0.1, 0.5, 1.0]).unwrap();
    assert!(rows.iter().all(|r| r.identity_residual.is_nan() || r.identity_residual.abs() <= 1e-12));
}

fn random_collar_map(grid: &CylinderGrid, seed: u64, amp: f64) -> SphereMapField {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-amp..amp)).collect();
    SphereMapField::from_fn(grid.n_theta, grid.n_s, 3, |i, j, o| {
        let (s, th) = (grid.s(j), grid.theta(i));
        let x = s / grid.half_length;
        let a = c[0] * x + c[1] * (PI * x).sin() * th.cos() + c[2] * th.sin();
        let b = c[3] * x * x + c[4] * (2.0 * th).cos() + c[5];
        o[0] = a.cos() * b.cos();
        o[1] = a.sin() * b.cos();
        o[2] = b.sin();
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tension_scaling_inequality(seed in 0u64..10_000, amp in 0.1f64..3.0, ell in 0.02f64..1.0) {
        let x = collar_half_length(ell, 0.5).unwrap();
        let grid = CylinderGrid::new(61, 16, x).unwrap();
        let u = random_collar_map(&grid, seed, amp);
        let t = flat_gauge_tension(&u, &grid, ell, None).unwrap();
        prop_assert!(t.margin >= -1e-12 * t.flat_l2.max(1.0));
    }

    #[test]
    fn node_energy_partitions_for_any_mask(seed in 0u64..10_000, mask in proptest::collection::vec(any::<bool>(), 61 * 16)) {
        let grid = CylinderGrid::new(61, 16, 12.0).unwrap();
        let u = random_collar_map(&grid, seed, 1.5);
        let e = node_energy(&u, &grid).unwrap();
        let thick: f64 = e.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum();
        let thin: f64 = e.iter().zip(&mask).filter(|(_, m)| !**m).map(|(v, _)| v).sum();
        let total = flat_energy(&u, &grid).unwrap();
        prop_assert!((thick + thin - total).abs() <= 1e-10 * total.max(1e-300));
    }
}
