//! Run configuration shared by the `tmflow` subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collarflow::CollarConfig;
use crate::error::{FlowError, Result};
use crate::hypgeom::{DegenerationModel, SurfaceTopology};
use crate::ricci::RicciConfig;
use crate::singular::{BranchParams, DetectionParams, DEFAULT_LADDER};
use crate::torusflow::{FlowConfig, TorusInitial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Torus,
    Collar,
    Ricci,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TorusScenario {
    pub flow: FlowConfig,
    pub initial: TorusInitial,
}

impl Default for TorusScenario {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            initial: TorusInitial::WrapPerturbed { epsilon: 0.1, noise: 0.0, seed: 0 },
        }
    }
}

/// Parameters of the singularity analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub detection: DetectionParams,
    pub branch: BranchParams,
    /// Extracted scales are flagged when above `scale_cap (T - t)^{1/2}`.
    pub scale_cap: f64,
    /// `K` of the `K (T - t)(E(t) - E(T))` thin-part cross-check.
    pub ledger_k: f64,
    /// Thick/thin thresholds, largest first.
    pub delta_ladder: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            detection: DetectionParams::default(),
            branch: BranchParams::default(),
            scale_cap: 1.0,
            ledger_k: 100.0,
            delta_ladder: DEFAULT_LADDER.to_vec(),
        }
    }
}

impl AnalysisConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let d = &self.detection;
        if !(d.eps0 > 0.0) {
            v.push(format!("analysis.detection.eps0 must be > 0, got {}", d.eps0));
        }
        if d.ladder.is_empty() || d.ladder.iter().any(|r| !(*r > 0.0)) {
            v.push("analysis.detection.ladder must be a nonempty list of positive radii".into());
        }
        if d.ladder.windows(2).any(|w| w[1] >= w[0]) {
            v.push("analysis.detection.ladder must be strictly decreasing".into());
        }
        if d.late_snapshots == 0 {
            v.push("analysis.detection.late_snapshots must be >= 1".into());
        }
        let b = &self.branch;
        if !(b.osc_threshold > 0.0) {
            v.push(format!("analysis.branch.osc_threshold must be > 0, got {}", b.osc_threshold));
        }
        let e = &b.extraction;
        if !(e.window_factor > 0.0) {
            v.push(format!("analysis.branch.extraction.window_factor must be > 0, got {}", e.window_factor));
        }
        if !(e.tension_threshold > 0.0) {
            v.push("analysis.branch.extraction.tension_threshold must be > 0".into());
        }
        if !(e.energy_floor >= 0.0) {
            v.push("analysis.branch.extraction.energy_floor must be >= 0".into());
        }
        if !(self.scale_cap > 0.0) {
            v.push("analysis.scale_cap must be > 0".into());
        }
        if !(self.ledger_k > 0.0) {
            v.push("analysis.ledger_k must be > 0".into());
        }
        if self.delta_ladder.is_empty() || self.delta_ladder.iter().any(|d| !(*d > 0.0)) {
            v.push("analysis.delta_ladder must be a nonempty list of positive thresholds".into());
        }
        v
    }
}

/// Topology of the collar scenario: the collar sits on a closed surface of
/// genus `genus` and pinches `pinched` curves into the listed limit pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegenerationConfig {
    pub genus: u32,
    pub pinched: u32,
    pub components: Vec<SurfaceTopology>,
}

impl Default for DegenerationConfig {
    /// A separating curve on a genus-2 surface.
    fn default() -> Self {
        Self { genus: 2, pinched: 1, components: vec![SurfaceTopology::new(1, 1), SurfaceTopology::new(1, 1)] }
    }
}

impl DegenerationConfig {
    pub fn model(&self) -> Result<DegenerationModel> {
        DegenerationModel::new(self.genus, self.pinched, self.components.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub output_dir: PathBuf,
    /// Overrides the snapshot cadence of the selected module.
    pub snapshot_every: Option<usize>,
    /// Overrides the seed of randomized initial data.
    pub seed: Option<u64>,
    pub torus: TorusScenario,
    pub collar: CollarConfig,
    pub ricci: RicciConfig,
    pub analysis: AnalysisConfig,
    pub degeneration: DegenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Torus,
            output_dir: PathBuf::from("out"),
            snapshot_every: None,
            seed: None,
            torus: TorusScenario::default(),
            collar: CollarConfig::default(),
            ricci: RicciConfig::default(),
            analysis: AnalysisConfig::default(),
            degeneration: DegenerationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| FlowError::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// The config with `snapshot_every` and `seed` pushed into the module blocks.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(k) = self.snapshot_every {
            c.torus.flow.snapshot_every = k;
            c.collar.snapshot_every = k;
        }
        if let (Some(s), TorusInitial::WrapPerturbed { seed, .. }) = (self.seed, &mut c.torus.initial) {
            *seed = s;
        }
        c
    }

    /// Every violated precondition of the selected scenario and the analysis.
    pub fn violations(&self) -> Vec<String> {
        let c = self.resolved();
        let mut v: Vec<String> = match c.scenario {
            Scenario::Torus => {
                let mut v: Vec<String> = c.torus.flow.violations().into_iter().map(|m| format!("torus.flow: {m}")).collect();
                if let TorusInitial::WrapPerturbed { epsilon, noise, .. } = c.torus.initial {
                    if !epsilon.is_finite() || !(noise >= 0.0) {
                        v.push("torus.initial: epsilon must be finite and noise >= 0".into());
                    }
                }
                v
            }
            Scenario::Collar => {
                let mut v: Vec<String> = c.collar.violations().into_iter().map(|m| format!("collar: {m}")).collect();
                if let Err(e) = c.degeneration.model() {
                    v.push(format!("degeneration: {e}"));
                }
                v
            }
            Scenario::Ricci => c.ricci.violations().into_iter().map(|m| format!("ricci: {m}")).collect(),
        };
        v.extend(c.analysis.violations());
        if self.snapshot_every == Some(0) {
            v.push("snapshot_every must be >= 1 when set".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(FlowError::Config(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for s in [Scenario::Torus, Scenario::Collar, Scenario::Ricci] {
            let c = RunConfig { scenario: s, ..RunConfig::default() };
            assert!(c.violations().is_empty(), "{s:?}: {:?}", c.violations());
        }
    }

    #[test]
    fn every_violation_is_listed() {
        let text = r#"{
            "scenario": "torus",
            "torus": { "flow": { "eta": -1.0, "N": 4, "cfl_factor": 0.9 } },
            "analysis": { "scale_cap": 0.0 }
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        let v = c.violations();
        assert_eq!(v.len(), 4, "{v:?}");
        match c.validate() {
            Err(FlowError::Config(list)) => assert_eq!(list, v),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{ "scenario": "torus", "bogus": 1 }"#).is_err());
        assert!(RunConfig::from_json(r#"{ "torus": { "flow": { "n": 64 } } }"#).is_err());
    }

    #[test]
    fn overrides_are_applied() {
        let c = RunConfig { seed: Some(9), snapshot_every: Some(3), ..RunConfig::default() }.resolved();
        assert_eq!(c.torus.flow.snapshot_every, 3);
        assert_eq!(c.collar.snapshot_every, 3);
        assert!(matches!(c.torus.initial, TorusInitial::WrapPerturbed { seed: 9, .. }));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig { scenario: Scenario::Collar, ..RunConfig::default() };
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }
}
