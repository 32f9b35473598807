//! Singularity analysis of stored runs and the end-to-end decomposition
//! pipeline: flow, analysis at the stop event, and Ricci continuation on
//! sphere components.

use serde::{Deserialize, Serialize};

use crate::collarflow::{self, CollarFlowState, CollarStop, CylinderGrid};
use crate::config::{AnalysisConfig, RunConfig, Scenario};
use crate::error::{FlowError, Result};
use crate::hypgeom::{geodesic_length_decay_fit, DecayFit, LengthSample, SurfaceTopology};
use crate::io::HistorySample;
use crate::ricci::{self, CuspedParams, RicciConfig, RicciRunReport};
use crate::singular::{
    collar_ledger_from, cutoff_energy_drift, cutoff_energy_series, detect_concentration_points, eps_regularity_gate,
    extract_bubble, half_energy_radius, segment_bubble_branch, select_good_times, torus_distance, torus_ledger,
    BubbleBranchReport, BubbleCandidate, ConcentrationPoint, CutoffFunction, DriftReport, EnergyLedger, GateReport,
    GoodTimeSequence,
};
use crate::torusflow::{self, injectivity_radius, FlowState, StopReason};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Torus,
    Collar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    pub cutoff_drift: Option<DriftReport>,
    pub eps_gate: Option<GateReport>,
    pub length_decay: Option<DecayFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub domain: Domain,
    /// Estimated singular time used for good times and scale caps.
    pub singular_time: f64,
    pub bubble_set: Vec<ConcentrationPoint>,
    pub candidates: Vec<BubbleCandidate>,
    pub good_times: GoodTimeSequence,
    pub branch: Option<BubbleBranchReport>,
    pub ledger: EnergyLedger,
    pub fitted_constants: FittedConstants,
}

impl AnalysisReport {
    pub fn accepted_bubble_energies(&self) -> Vec<f64> {
        self.candidates.iter().filter(|c| c.accepted).map(|c| c.energy).collect()
    }
}

/// Last sample time plus one sample spacing.
fn next_sample_time(history: &[HistorySample]) -> Result<f64> {
    let last = history.last().ok_or_else(|| FlowError::invalid("empty history"))?;
    let dt = if history.len() >= 2 { last.t - history[history.len() - 2].t } else { 0.0 };
    Ok(last.t + dt.max(f64::EPSILON * last.t.abs().max(1.0)))
}

pub fn analyze_torus(history: &[HistorySample], snapshots: &[FlowState], cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let last = snapshots.last().ok_or_else(|| FlowError::invalid("analysis needs at least one snapshot"))?;
    let big_t = next_sample_time(history)?;
    let bubble_set = detect_concentration_points(snapshots, &cfg.detection)?;
    let r_max = cfg.detection.ladder.iter().cloned().fold(0.0, f64::max);
    let mut candidates = Vec::new();
    for p in &bubble_set {
        let scale = half_energy_radius(&last.u, &last.modulus, p.position, r_max)?;
        match extract_bubble(&last.u, &last.modulus, p.position, scale, &cfg.branch.extraction) {
            Ok(mut c) => {
                c.flag_scale_cap(cfg.scale_cap, big_t, last.time);
                candidates.push(c);
            }
            Err(e) => candidates.push(BubbleCandidate {
                center: p.position,
                scale,
                window_energy: 0.0,
                energy: 0.0,
                rescaled_tension: f64::NAN,
                centroid_offset: 0.0,
                misaligned: false,
                accepted: false,
                reason: Some(e.to_string()),
                scale_within_cap: None,
                rescaled: None,
            }),
        }
    }
    let bubbles: Vec<f64> = candidates.iter().filter(|c| c.accepted).map(|c| c.energy).collect();
    let ledger = torus_ledger(history, last, &bubbles, &cfg.delta_ladder)?;

    // local estimates around the first concentration point, or the centre
    let centre = bubble_set.first().map_or((0.5, 0.5), |p| p.position);
    let phi = CutoffFunction { center: centre, radius: 0.25 };
    let cutoff_drift = if snapshots.len() >= 2 {
        let series = cutoff_energy_series(snapshots, &phi)?;
        let delta = injectivity_radius(&last.modulus).min(1.0);
        Some(cutoff_energy_drift(&series, delta, phi.gradient_sup())?)
    } else {
        None
    };
    // gate at the node farthest from every concentration point
    let n = last.u.nx;
    let far = if bubble_set.is_empty() {
        (0.0, 0.0)
    } else {
        let h = 1.0 / n as f64;
        let mut best = ((0.0, 0.0), -1.0);
        for j in 0..n {
            for i in 0..n {
                let x = (i as f64 * h, j as f64 * h);
                let d = bubble_set.iter().map(|p| torus_distance(&last.modulus, x, p.position)).fold(f64::INFINITY, f64::min);
                if d > best.1 {
                    best = (x, d);
                }
            }
        }
        best.0
    };
    let eps_gate = Some(eps_regularity_gate(&last.u, &last.modulus, far, cfg.detection.ladder[cfg.detection.ladder.len() - 1].max(0.1), cfg.detection.eps0)?);
    Ok(AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        domain: Domain::Torus,
        singular_time: big_t,
        bubble_set,
        candidates,
        good_times: select_good_times(history, big_t)?,
        branch: None,
        ledger,
        fitted_constants: FittedConstants { cutoff_drift, eps_gate, length_decay: None },
    })
}

/// Singular time of a collar history: `ell` extrapolated linearly to zero from
/// the last two samples.
pub fn collar_singular_time(history: &[HistorySample]) -> Result<f64> {
    let n = history.len();
    if n < 2 {
        return next_sample_time(history);
    }
    let (a, b) = (&history[n - 2], &history[n - 1]);
    let rate = (a.a - b.a) / (b.t - a.t);
    if rate > 0.0 && b.a > 0.0 {
        Ok(b.t + b.a / rate)
    } else {
        next_sample_time(history)
    }
}

pub fn analyze_collar(
    history: &[HistorySample],
    snapshots: &[CollarFlowState],
    grid: &CylinderGrid,
    cfg: &AnalysisConfig,
) -> Result<AnalysisReport> {
    let last = snapshots.last().ok_or_else(|| FlowError::invalid("analysis needs at least one snapshot"))?;
    let big_t = collar_singular_time(history)?;
    let mut branch = segment_bubble_branch(&last.u, grid, &cfg.branch)?;
    for c in &mut branch.candidates {
        c.flag_scale_cap(cfg.scale_cap, big_t, last.time);
    }
    let candidates = branch.candidates.clone();
    let bubbles: Vec<f64> = candidates.iter().filter(|c| c.accepted).map(|c| c.energy).collect();
    let e_final = collarflow::flat_energy(&last.u, grid)?;
    let ledger = collar_ledger_from(history, grid, snapshots, last, big_t, &bubbles, &cfg.delta_ladder, cfg.ledger_k)?;
    let lengths: Vec<LengthSample> =
        history.iter().filter(|s| s.t < big_t).map(|s| LengthSample { t: s.t, ell: s.a, energy: s.energy }).collect();
    let length_decay = if lengths.is_empty() { None } else { Some(geodesic_length_decay_fit(&lengths, big_t, e_final)?) };
    Ok(AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        domain: Domain::Collar,
        singular_time: big_t,
        bubble_set: Vec::new(),
        candidates,
        good_times: select_good_times(history, big_t)?,
        branch: Some(branch),
        ledger,
        fitted_constants: FittedConstants { cutoff_drift: None, eps_gate: None, length_decay },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Bubbling,
    CollarPinch,
    Extinction,
    Timeout,
}

/// Canonical metric choice on one limit component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub component: SurfaceTopology,
    /// Present for punctured spheres: the Ricci flow from the capped cusped
    /// metric.
    pub ricci: Option<RicciRunReport>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularEvent {
    pub time: f64,
    pub kind: EventKind,
    pub pinched: u32,
    pub punctures: u32,
    pub components: Vec<SurfaceTopology>,
    pub ledger: Option<EnergyLedger>,
    pub continuation: Vec<Continuation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleSummary {
    pub center: (f64, f64),
    pub scale: f64,
    pub energy: f64,
    pub rescaled_tension: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub components: Vec<SurfaceTopology>,
    /// `k` cylinders glue the `2k` punctures back together.
    pub glued_cylinders: u32,
    pub punctures: u32,
    pub bubbles: Vec<BubbleSummary>,
}

/// `E(0) >= component energy + bubble energy`, up to `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conservation {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub component_energy: f64,
    pub bubble_energy: f64,
    /// `final - component - bubbles`, energy left on the necks.
    pub neck_energy: f64,
    /// `initial - component - bubbles`.
    pub gap: f64,
    pub tolerance: f64,
    pub holds: bool,
}

impl Conservation {
    fn new(initial: f64, fin: f64, component: f64, bubble: f64) -> Self {
        let tolerance = 1e-9 * initial.abs().max(1.0);
        let gap = initial - component - bubble;
        Self {
            initial_energy: initial,
            final_energy: fin,
            component_energy: component,
            bubble_energy: bubble,
            neck_energy: fin - component - bubble,
            gap,
            tolerance,
            holds: gap >= -tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedStage {
    pub stage: String,
    pub error: String,
    /// The stage stopped on a CFL violation or a numerical abort.
    pub numerical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub events: Vec<SingularEvent>,
    pub reconstruction: Reconstruction,
    pub conservation: Option<Conservation>,
    pub failed_stage: Option<FailedStage>,
}

impl PipelineReport {
    fn empty(scenario: Scenario) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            scenario,
            events: Vec::new(),
            reconstruction: Reconstruction { components: Vec::new(), glued_cylinders: 0, punctures: 0, bubbles: Vec::new() },
            conservation: None,
            failed_stage: None,
        }
    }

    fn fail(mut self, stage: &str, e: FlowError) -> Self {
        let numerical = matches!(e, FlowError::Cfl { .. } | FlowError::NumericalAbort { .. });
        self.failed_stage = Some(FailedStage { stage: stage.into(), error: e.to_string(), numerical });
        self
    }

    /// Event times strictly increase and every collar-pinch event carries
    /// `2k` punctures.
    pub fn events_consistent(&self) -> bool {
        self.events.windows(2).all(|w| w[1].time > w[0].time)
            && self.events.iter().filter(|e| e.kind == EventKind::CollarPinch).all(|e| e.punctures == 2 * e.pinched)
    }
}

fn summaries(candidates: &[BubbleCandidate]) -> Vec<BubbleSummary> {
    candidates
        .iter()
        .filter(|c| c.accepted)
        .map(|c| BubbleSummary { center: c.center, scale: c.scale, energy: c.energy, rescaled_tension: c.rescaled_tension })
        .collect()
}

/// Ricci continuation on a punctured-sphere component.
pub fn continue_sphere(component: SurfaceTopology, ricci: &RicciConfig) -> Result<Continuation> {
    if !component.is_punctured_sphere() || component.punctures < 3 {
        return Ok(Continuation {
            component,
            ricci: None,
            note: "not a punctured sphere; the limit hyperbolic metric is kept".into(),
        });
    }
    let cfg = RicciConfig {
        initial: CuspedParams { punctures: component.punctures as usize, ..ricci.initial },
        ..ricci.clone()
    };
    let run = ricci::run_ricci(&cfg)?;
    let report = ricci::extinction_report(&run.samples, cfg.initial.punctures, run.initial.exact_area)?;
    Ok(Continuation {
        component,
        ricci: Some(report),
        note: "conformal structure normalized by Ricci flow from the capped cusped metric".into(),
    })
}

pub fn pipeline(config: &RunConfig) -> PipelineReport {
    let report = PipelineReport::empty(config.scenario);
    if let Err(e) = config.validate() {
        return report.fail("config", e);
    }
    let cfg = config.resolved();
    match cfg.scenario {
        Scenario::Torus => torus_pipeline(&cfg, report),
        Scenario::Collar => collar_pipeline(&cfg, report),
        Scenario::Ricci => ricci_pipeline(&cfg, report),
    }
}

fn torus_pipeline(cfg: &RunConfig, mut report: PipelineReport) -> PipelineReport {
    let flow = &cfg.torus.flow;
    let run = match cfg
        .torus
        .initial
        .build(flow.n, flow.target_dim)
        .and_then(|u| FlowState::new(0.0, u, flow.modulus))
        .and_then(|s| torusflow::run(flow, s))
    {
        Ok(r) => r,
        Err(e) => return report.fail("flow", e),
    };
    let analysis = match analyze_torus(&run.history, &run.snapshots, &cfg.analysis) {
        Ok(a) => a,
        Err(e) => return report.fail("analysis", e),
    };
    let degenerate = run.status == StopReason::Degenerate;
    let components = if degenerate { vec![SurfaceTopology::new(0, 2)] } else { vec![SurfaceTopology::new(1, 0)] };
    let kind = if degenerate {
        EventKind::CollarPinch
    } else if !analysis.bubble_set.is_empty() {
        EventKind::Bubbling
    } else {
        EventKind::Timeout
    };
    let pinched = u32::from(degenerate);
    report.events.push(SingularEvent {
        time: run.final_state.time,
        kind,
        pinched,
        punctures: 2 * pinched,
        components: components.clone(),
        ledger: Some(analysis.ledger.clone()),
        continuation: Vec::new(),
    });
    let bubbles = summaries(&analysis.candidates);
    let b: f64 = bubbles.iter().map(|b| b.energy).sum();
    let l = &analysis.ledger;
    report.conservation = Some(Conservation::new(l.initial_energy, l.final_energy, (l.final_energy - b).max(0.0), b));
    report.reconstruction = Reconstruction { components, glued_cylinders: pinched, punctures: 2 * pinched, bubbles };
    report
}

fn collar_pipeline(cfg: &RunConfig, mut report: PipelineReport) -> PipelineReport {
    let model = match cfg.degeneration.model() {
        Ok(m) => m,
        Err(e) => return report.fail("config", e),
    };
    let run = match collarflow::run_collar(&cfg.collar) {
        Ok(r) => r,
        Err(e) => return report.fail("flow", e),
    };
    let analysis = match analyze_collar(&run.history, &run.snapshots, &run.grid, &cfg.analysis) {
        Ok(a) => a,
        Err(e) => return report.fail("analysis", e),
    };
    let bubbles = summaries(&analysis.candidates);
    let b: f64 = bubbles.iter().map(|b| b.energy).sum();
    let l = &analysis.ledger;
    report.conservation = Some(Conservation::new(l.initial_energy, l.final_energy, l.e_thick, b));
    let pinched = run.status == CollarStop::Pinched;
    let (components, k) = if pinched { (model.components.clone(), model.pinched) } else { (Vec::new(), 0) };
    let mut continuation = Vec::new();
    for c in &components {
        match continue_sphere(*c, &cfg.ricci) {
            Ok(x) => continuation.push(x),
            Err(e) => {
                report.reconstruction.bubbles = bubbles;
                return report.fail("continuation", e);
            }
        }
    }
    report.events.push(SingularEvent {
        time: run.final_state.time,
        kind: if pinched { EventKind::CollarPinch } else { EventKind::Timeout },
        pinched: k,
        punctures: 2 * k,
        components: components.clone(),
        ledger: Some(analysis.ledger.clone()),
        continuation,
    });
    report.reconstruction = Reconstruction { components, glued_cylinders: k, punctures: 2 * k, bubbles };
    report
}

fn ricci_pipeline(cfg: &RunConfig, mut report: PipelineReport) -> PipelineReport {
    let n = cfg.ricci.initial.punctures as u32;
    let component = SurfaceTopology::new(0, n);
    let c = match continue_sphere(component, &cfg.ricci) {
        Ok(c) => c,
        Err(e) => return report.fail("continuation", e),
    };
    let time = c.ricci.as_ref().map_or(f64::NAN, |r| r.predicted_extinction);
    report.events.push(SingularEvent {
        time,
        kind: EventKind::Extinction,
        pinched: 0,
        punctures: n,
        components: vec![component],
        ledger: None,
        continuation: vec![c],
    });
    report.reconstruction.components = vec![component];
    report.reconstruction.punctures = n;
    report
}
