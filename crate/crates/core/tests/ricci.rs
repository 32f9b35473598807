use std::f64::consts::PI;

use approx::assert_relative_eq;
use proptest::prelude::*;
use tmflow_core::error::FlowError;
use tmflow_core::ricci::*;

fn small(punctures: usize, cap: f64) -> RicciConfig {
    RicciConfig { n_phi: 48, n_theta: 25, initial: CuspedParams { punctures, cap, ..CuspedParams::default() }, ..RicciConfig::default() }
}

#[test]
fn exact_cusped_areas_and_extinction_times() {
    assert_relative_eq!(cusped_area(3).unwrap(), 2.0 * PI, max_relative = 1e-15);
    assert_relative_eq!(cusped_area(4).unwrap(), 4.0 * PI, max_relative = 1e-15);
    assert_eq!(extinction_time(3).unwrap(), 0.25);
    assert_eq!(extinction_time(4).unwrap(), 0.5);
    assert!(matches!(cusped_area(2), Err(FlowError::Domain(_))));
    let g = LatLongGrid::new(32, 17).unwrap();
    assert!(matches!(build_cusped_initial(g, &CuspedParams { punctures: 2, ..CuspedParams::default() }), Err(FlowError::Domain(_))));
}

#[test]
fn crowded_punctures_are_rejected() {
    let g = LatLongGrid::new(16, 9).unwrap();
    assert!(build_cusped_initial(g, &CuspedParams { punctures: 12, ..CuspedParams::default() }).is_err());
}

#[test]
fn constant_factor_stays_constant_and_shrinks_linearly() {
    let g = LatLongGrid::new(32, 17).unwrap();
    let mut m = SphereConformalMetric::constant(g, 0.3);
    let a0 = m.area();
    let mut t = 0.0;
    for _ in 0..40 {
        let dt = RicciOperator::new(g).cfl_limit(&m.v, 0.2);
        m = ricci_step(&m, dt, 0.2).unwrap();
        t += dt;
    }
    let (lo, hi) = m.v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    assert!(hi - lo <= 1e-13);
    assert_relative_eq!(m.area(), a0 - 8.0 * PI * t, max_relative = 1e-12);
}

#[test]
fn round_start_reaches_half_with_no_deviation() {
    let g = LatLongGrid::new(32, 17).unwrap();
    let cfg = RicciConfig { n_phi: 32, n_theta: 17, sample_every: 5, ..RicciConfig::default() };
    let run = run_ricci_from(&cfg, SphereConformalMetric::constant(g, 0.0)).unwrap();
    let r = extinction_report(&run.samples, 4, 4.0 * PI).unwrap();
    assert_relative_eq!(r.predicted_extinction, 0.5, max_relative = 1e-14);
    assert!(r.final_normalized_deviation <= 1e-9);
    assert!(r.slope_error <= 1e-12);
}

#[test]
fn report_needs_ten_samples() {
    let s = RicciSample { t: 0.0, area: 1.0, min_k: 1.0, max_k: 1.0, normalized_deviation: 0.0 };
    assert!(extinction_report(&vec![s; 9], 3, 2.0 * PI).is_err());
}

#[test]
fn capped_three_cusp_run_on_a_coarse_grid() {
    let cfg = small(3, 40.0);
    let run = run_ricci(&cfg).unwrap();
    assert_eq!(run.status, RicciStop::NearExtinction);
    let r = extinction_report(&run.samples, 3, run.initial.exact_area).unwrap();
    assert!(r.area_strictly_decreasing);
    assert!(r.slope_error <= 0.01, "{}", r.slope_error);
    // the prediction carries exactly the capping deficit
    assert_relative_eq!(r.predicted_extinction, (2.0 * PI - r.area_deficit) / (8.0 * PI), max_relative = 1e-12);
    assert!(r.final_normalized_deviation <= 0.05, "{}", r.final_normalized_deviation);
    if let Some(t) = run.last_min_k_violation {
        assert!(t <= 0.02 * r.predicted_extinction, "min K fell at t = {t}");
    }
    let header = ricci_csv(&run.samples);
    assert!(header.starts_with("t,area,minK,maxK,normalized_deviation\n"));
    assert_eq!(header.lines().count(), run.samples.len() + 1);
}

#[test]
fn four_punctures_target_four_pi() {
    let g = LatLongGrid::new(48, 25).unwrap();
    let m = build_cusped_initial(g, &CuspedParams { punctures: 4, ..CuspedParams::default() }).unwrap();
    assert_relative_eq!(m.exact_area, 4.0 * PI, max_relative = 1e-15);
    assert!(m.area < m.exact_area && m.area_deficit / m.exact_area < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    #[test]
    fn larger_caps_shrink_the_deficit(cap in 10.0f64..60.0, n in 3usize..5) {
        let g = LatLongGrid::new(32, 17).unwrap();
        let lo = build_cusped_initial(g, &CuspedParams { punctures: n, cap, ..CuspedParams::default() }).unwrap();
        let hi = build_cusped_initial(g, &CuspedParams { punctures: n, cap: 2.0 * cap, ..CuspedParams::default() }).unwrap();
        prop_assert!(lo.area_deficit > hi.area_deficit && hi.area_deficit > 0.0);
    }
}
