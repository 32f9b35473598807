use std::f64::consts::PI;

use tmflow_core::config::{DegenerationConfig, RunConfig, Scenario};
use tmflow_core::hypgeom::SurfaceTopology;
use tmflow_core::pipeline::*;
use tmflow_core::ricci::{CuspedParams, RicciConfig};

fn coarse_ricci() -> RicciConfig {
    RicciConfig { n_phi: 48, n_theta: 25, initial: CuspedParams { cap: 40.0, ..CuspedParams::default() }, ..RicciConfig::default() }
}

#[test]
fn ricci_only_pipeline_ends_in_extinction() {
    let cfg = RunConfig { scenario: Scenario::Ricci, ricci: coarse_ricci(), ..RunConfig::default() };
    let r = pipeline(&cfg);
    assert!(r.failed_stage.is_none(), "{:?}", r.failed_stage);
    assert_eq!(r.events.len(), 1);
    let e = &r.events[0];
    assert_eq!(e.kind, EventKind::Extinction);
    let rep = e.continuation[0].ricci.as_ref().unwrap();
    assert!((e.time - 0.25).abs() <= rep.area_deficit / (8.0 * PI) + 1e-12);
    assert_eq!(rep.extinction_time, 0.25);
}

#[test]
fn collar_pipeline_inventories_the_glued_bubble() {
    let cfg = RunConfig {
        scenario: Scenario::Collar,
        degeneration: DegenerationConfig {
            genus: 2,
            pinched: 3,
            components: vec![SurfaceTopology::new(0, 3), SurfaceTopology::new(0, 3)],
        },
        ricci: coarse_ricci(),
        ..RunConfig::default()
    };
    let r = pipeline(&cfg);
    assert!(r.failed_stage.is_none(), "{:?}", r.failed_stage);
    assert!(r.events_consistent());
    assert_eq!(r.events.iter().map(|e| e.kind).collect::<Vec<_>>(), vec![EventKind::CollarPinch]);
    let e = &r.events[0];
    assert_eq!((e.pinched, e.punctures), (3, 6));
    assert!(e.continuation.iter().all(|c| c.ricci.as_ref().is_some_and(|x| x.punctures == 3)));
    assert_eq!(r.reconstruction.bubbles.len(), 1);
    assert_eq!(r.reconstruction.glued_cylinders, 3);
    let l = e.ledger.as_ref().unwrap();
    assert!(l.thin_vs_bubbles.unwrap() <= 0.05);
    assert!(l.additivity_residual <= 1e-10);
    let c = r.conservation.as_ref().unwrap();
    assert!(c.holds && c.gap >= 0.0);
}

#[test]
fn failing_stage_is_reported() {
    let mut cfg = RunConfig { scenario: Scenario::Collar, ..RunConfig::default() };
    cfg.degeneration.pinched = 2;
    let r = pipeline(&cfg);
    assert_eq!(r.failed_stage.as_ref().unwrap().stage, "config");
    assert!(r.events.is_empty());

    // sphere pieces too crowded for an 8x5 Ricci grid
    let mut cfg = RunConfig {
        scenario: Scenario::Collar,
        degeneration: DegenerationConfig {
            genus: 2,
            pinched: 3,
            components: vec![SurfaceTopology::new(0, 3), SurfaceTopology::new(0, 3)],
        },
        ricci: RicciConfig { n_phi: 8, n_theta: 5, ..RicciConfig::default() },
        ..RunConfig::default()
    };
    cfg.collar.n_s = 121;
    cfg.collar.n_theta = 16;
    let r = pipeline(&cfg);
    assert_eq!(r.failed_stage.as_ref().unwrap().stage, "continuation");
    assert_eq!(r.reconstruction.bubbles.len(), 1);
}

#[test]
fn reports_are_deterministic() {
    let mut cfg = RunConfig::default();
    cfg.torus.flow.n = 16;
    cfg.torus.flow.max_time = 0.005;
    cfg.seed = Some(11);
    let a = serde_json::to_string(&pipeline(&cfg)).unwrap();
    let b = serde_json::to_string(&pipeline(&cfg)).unwrap();
    assert_eq!(a, b);
}
