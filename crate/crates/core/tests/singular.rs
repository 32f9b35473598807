use proptest::prelude::*;
use tmflow_core::collarflow::{CollarConfig, CollarInitial, CylinderGrid};
use tmflow_core::field::SphereMapField;
use tmflow_core::singular::*;
use tmflow_core::sphere::random_rotation;
use tmflow_core::torusflow::{energy, FlowState, TorusInitial, TorusModulus};

fn shrinking(n: usize, m: TorusModulus, centres: &[(f64, f64)], glue: Glue) -> Vec<FlowState> {
    [0.06, 0.05, 0.04, 0.03, 0.02]
        .iter()
        .enumerate()
        .map(|(k, &lam)| {
            let b: Vec<_> = centres.iter().map(|c| (*c, lam)).collect();
            FlowState::new(k as f64 * 1e-3, synthetic_torus_bubbles(n, &m, &b, glue).unwrap(), m).unwrap()
        })
        .collect()
}

#[test]
fn synthetic_bubble_energy_within_two_percent() {
    let m = TorusModulus::default();
    let u = synthetic_torus_bubbles(256, &m, &[((0.5, 0.5), 0.03)], Glue::default()).unwrap();
    let scale = half_energy_radius(&u, &m, (0.5, 0.5), 0.2).unwrap();
    let c = extract_bubble(&u, &m, (0.5, 0.5), scale, &ExtractionParams::default()).unwrap();
    assert!(c.accepted && !c.misaligned, "{c:?}");
    assert!((c.energy / BUBBLE_ENERGY - 1.0).abs() <= 0.02, "{}", c.energy);
}

#[test]
fn off_centre_windows_are_flagged_or_lose_energy() {
    let m = TorusModulus::default();
    let lam = 0.03;
    let u = synthetic_torus_bubbles(256, &m, &[((0.5, 0.5), lam)], Glue::default()).unwrap();
    let scale = half_energy_radius(&u, &m, (0.5, 0.5), 0.2).unwrap();
    let params = ExtractionParams::default();
    let near = extract_bubble(&u, &m, (0.5 + 3.0 * lam, 0.5), scale, &params).unwrap();
    assert!(near.misaligned, "{near:?}");
    let far = extract_bubble(&u, &m, (0.5 + 7.0 * lam, 0.5), scale, &params).unwrap();
    assert!(far.misaligned && far.energy < 0.9 * BUBBLE_ENERGY, "{}", far.energy / BUBBLE_ENERGY);
}

#[test]
fn detector_finds_one_and_two_bubbles() {
    let m = TorusModulus::default();
    let one = detect_concentration_points(&shrinking(128, m, &[(0.5, 0.5)], Glue::default()), &DetectionParams::default()).unwrap();
    assert_eq!(one.iter().map(|p| p.node).collect::<Vec<_>>(), vec![(64, 64)]);

    let glue = Glue { inner: 0.12, outer: 0.22 };
    let centres = [(0.25, 0.25), (0.75, 0.7)];
    let two = detect_concentration_points(&shrinking(128, m, &centres, glue), &DetectionParams::default()).unwrap();
    assert_eq!(two.len(), 2);
    for c in centres {
        assert!(two.iter().any(|p| torus_distance(&m, p.position, c) <= 1.5 / 128.0), "{c:?} missing in {two:?}");
    }
}

#[test]
fn smooth_maps_have_no_concentration() {
    let m = TorusModulus::default();
    let snaps: Vec<FlowState> = (0..5)
        .map(|k| {
            let u = TorusInitial::WrapPerturbed { epsilon: 0.1 * k as f64, noise: 0.0, seed: 0 }.build(64, 2).unwrap();
            FlowState::new(k as f64, u, m).unwrap()
        })
        .collect();
    assert!(detect_concentration_points(&snaps, &DetectionParams::default()).unwrap().is_empty());
}

fn cylinder(initial: CollarInitial, n_s: usize, n_theta: usize) -> (SphereMapField, CylinderGrid) {
    let cfg = CollarConfig { n_s, n_theta, initial, ..CollarConfig::default() };
    let grid = cfg.grid().unwrap();
    (cfg.initial.build(&grid, 2).unwrap(), grid)
}

#[test]
fn two_bubble_branch_is_stable_under_refinement() {
    let init = CollarInitial::TwoBubbles { center: 0.0, separation: 20.0 };
    let (u, g) = cylinder(init.clone(), 347, 32);
    let (uf, gf) = cylinder(init, 693, 64);
    let a = segment_bubble_branch(&u, &g, &BranchParams::default()).unwrap();
    let b = segment_bubble_branch(&uf, &gf, &BranchParams::default()).unwrap();
    assert_eq!(a.splits.len(), 4);
    assert_eq!(a.candidates.iter().filter(|c| c.accepted).count(), 2);
    for (x, y) in a.splits.iter().zip(&b.splits) {
        assert!((x - y).abs() <= g.h_s());
    }
    assert!(a.ledger_residual <= 1e-10);
}

#[test]
fn ledger_without_bubbles_reproduces_the_final_energy() {
    let m = TorusModulus::default();
    let u = TorusInitial::Wrap.build(32, 2).unwrap();
    let s = FlowState::new(0.01, u, m).unwrap();
    let h = vec![FlowState::new(0.0, s.u.clone(), m).unwrap().history_sample(1.0).unwrap(), s.history_sample(1.0).unwrap()];
    let l = torus_ledger(&h, &s, &[], &DEFAULT_LADDER).unwrap();
    assert_eq!(l.e_thick + l.e_thin, energy(&s.u, &m).unwrap());
    assert!(l.thin_vs_bubbles.is_none());
}

fn roll_theta(u: &SphereMapField, k: usize) -> SphereMapField {
    SphereMapField::from_fn(u.nx, u.ny, u.comps, |i, j, o| o.copy_from_slice(u.at((i + k) % u.nx, j))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn osc_is_rotation_invariant(shift in 0usize..32, seed in 0u64..1000, center in -5.0f64..5.0) {
        use rand::SeedableRng;
        let (u, _) = cylinder(CollarInitial::Bubble { center, twist: 0.05 }, 121, 32);
        let base = oscillation_profile(&u).unwrap();
        let rolled = oscillation_profile(&roll_theta(&u, shift)).unwrap();
        let mut rotated = u.clone();
        rotated.map_values(&random_rotation(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)));
        let rotated = oscillation_profile(&rotated).unwrap();
        for ((a, b), c) in base.iter().zip(&rolled).zip(&rotated) {
            prop_assert!((a - b).abs() <= 1e-12 && (a - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn splits_are_theta_rotation_invariant(shift in 0usize..32, center in -4.0f64..4.0) {
        let (u, g) = cylinder(CollarInitial::Bubble { center, twist: 0.02 }, 201, 32);
        let a = segment_bubble_branch(&u, &g, &BranchParams::default()).unwrap();
        let b = segment_bubble_branch(&roll_theta(&u, shift), &g, &BranchParams::default()).unwrap();
        prop_assert_eq!(a.splits.len(), b.splits.len());
        for (x, y) in a.splits.iter().zip(&b.splits) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn window_energy_is_conformally_invariant(cx in 0.3f64..0.7, cy in 0.3f64..0.7, lam in 0.02f64..0.05, scale in 0.01f64..0.05) {
        let m = TorusModulus { a: 0.1, b: 1.1 };
        let u = synthetic_torus_bubbles(64, &m, &[((cx, cy), lam)], Glue::default()).unwrap();
        let c = extract_bubble(&u, &m, (cx, cy), scale, &ExtractionParams::default()).unwrap();
        prop_assert!((c.energy - c.window_energy).abs() <= 1e-10 * c.window_energy.max(1e-300));
    }

    #[test]
    fn detections_respect_energy_quantization(
        k in 1usize..4,
        lam in 0.01f64..0.04,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = TorusModulus::default();
        let centres: Vec<((f64, f64), f64)> = (0..k).map(|_| ((rng.gen(), rng.gen()), lam)).collect();
        let glue = Glue { inner: 0.08, outer: 0.15 };
        let snaps: Vec<FlowState> = (0..3)
            .map(|t| FlowState::new(t as f64, synthetic_torus_bubbles(48, &m, &centres, glue).unwrap(), m).unwrap())
            .collect();
        let params = DetectionParams::default();
        let found = detect_concentration_points(&snaps, &params).unwrap();
        let e0 = energy(&snaps[0].u, &m).unwrap();
        prop_assert!(found.len() as f64 <= e0 / params.eps0);
    }
}
