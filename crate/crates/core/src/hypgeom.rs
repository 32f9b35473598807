//! Hyperbolic collar geometry.
//!
//! A closed geodesic of length `ell` on a hyperbolic surface has a standard
//! collar neighbourhood which, in the flat coordinate `s`, is the cylinder
//! `(-X, X) x S^1` with metric `rho(s)^2 (ds^2 + dtheta^2)` where
//!
//! ```text
//! rho(s) = ell / (2 pi cos(ell s / 2 pi))
//! ```
//!
//! The `delta`-thin part of the collar is the sub-cylinder `|s| < X(ell, delta)`.
//! All quantities are dimensionless (curvature -1 units).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

/// Slack allowed when the arccos argument overshoots 1 through rounding.
const ARCCOS_CLAMP: f64 = 1e-14;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(FlowError::domain(format!("{name} must be finite and > 0, got {v}")));
    }
    Ok(())
}

/// The sub-collar of a geodesic of length `ell` cut at thinness `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollarGeometry {
    pub ell: f64,
    pub delta: f64,
    /// Half-length of the sub-collar in the flat coordinate.
    pub half_length: f64,
}

impl CollarGeometry {
    pub fn new(ell: f64, delta: f64) -> Result<Self> {
        let half_length = collar_half_length(ell, delta)?;
        Ok(Self { ell, delta, half_length })
    }

    pub fn rho(&self, s: f64) -> Result<f64> {
        collar_conformal_factor(self.ell, s)
    }

    /// `rho` at the centre of the collar, `ell / 2 pi`.
    pub fn rho_min(&self) -> f64 {
        self.ell / (2.0 * PI)
    }

    /// `rho` at `s = X`; equals `ell sinh(delta) / (2 pi sinh(ell/2))` when `X > 0`.
    pub fn rho_boundary(&self) -> f64 {
        collar_conformal_factor(self.ell, self.half_length).unwrap_or(f64::NAN)
    }

    /// Absolute residual of `cos(ell X / 2 pi) sinh(delta) = sinh(ell / 2)`.
    /// `None` when the sub-collar is empty.
    pub fn identity_residual(&self) -> Option<f64> {
        if self.half_length <= 0.0 {
            return None;
        }
        let lhs = (self.ell * self.half_length / (2.0 * PI)).cos() * self.delta.sinh();
        Some((lhs - (self.ell / 2.0).sinh()).abs())
    }
}

/// Half-length `X(ell, delta)` of the `delta`-thin sub-collar.
///
/// Returns `(2 pi / ell) arccos(sinh(ell/2) / sinh(delta))` when `2 delta >= ell`
/// and `0` otherwise. At `2 delta = ell` both branches agree.
pub fn collar_half_length(ell: f64, delta: f64) -> Result<f64> {
    check_positive("ell", ell)?;
    check_positive("delta", delta)?;
    if 2.0 * delta < ell {
        return Ok(0.0);
    }
    let mut arg = (ell / 2.0).sinh() / delta.sinh();
    if arg > 1.0 {
        if arg - 1.0 <= ARCCOS_CLAMP {
            arg = 1.0;
        } else {
            return Err(FlowError::domain(format!(
                "arccos argument {arg} outside [0, 1] for ell = {ell}, delta = {delta}"
            )));
        }
    }
    let x = 2.0 * PI / ell * arg.acos();
    if !x.is_finite() {
        return Err(FlowError::domain(format!("non-finite half-length for ell = {ell}")));
    }
    Ok(x)
}

fn collar_angle(ell: f64, s: f64) -> Result<f64> {
    check_positive("ell", ell)?;
    if !s.is_finite() {
        return Err(FlowError::domain("collar coordinate must be finite"));
    }
    let angle = ell * s / (2.0 * PI);
    if angle.abs() >= PI / 2.0 {
        return Err(FlowError::domain(format!(
            "s = {s} outside the collar |s| < pi^2 / ell = {}",
            PI * PI / ell
        )));
    }
    Ok(angle)
}

/// Conformal factor `rho_ell(s) = ell / (2 pi cos(ell s / 2 pi))`.
pub fn collar_conformal_factor(ell: f64, s: f64) -> Result<f64> {
    let angle = collar_angle(ell, s)?;
    Ok(ell / (2.0 * PI * angle.cos()))
}

/// Lower bound for the hyperbolic injectivity radius at collar coordinate `s`.
///
/// This is `rho_ell(s)`; the exact collar value is [`collar_injectivity_radius`].
pub fn collar_injectivity_lower_bound(ell: f64, s: f64) -> Result<f64> {
    collar_conformal_factor(ell, s)
}

/// Injectivity radius at collar coordinate `s`, from
/// `sinh(inj) cos(ell s / 2 pi) = sinh(ell / 2)`.
///
/// The `delta`-thin set `{inj < delta}` is exactly `|s| < X(ell, delta)`.
pub fn collar_injectivity_radius(ell: f64, s: f64) -> Result<f64> {
    let angle = collar_angle(ell, s)?;
    Ok(((ell / 2.0).sinh() / angle.cos()).asinh())
}

/// `delta_K(t) = K (T - t) (E(t) - E(T))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinchingThreshold {
    pub k: f64,
    pub singular_time: f64,
    pub energy_at_t: f64,
    pub limit_energy: f64,
    pub value: f64,
}

pub fn pinching_threshold(k: f64, big_t: f64, t: f64, e_t: f64, e_big_t: f64) -> Result<f64> {
    if ![k, big_t, t, e_t, e_big_t].iter().all(|v| v.is_finite()) {
        return Err(FlowError::domain("pinching threshold arguments must be finite"));
    }
    if k < 0.0 {
        return Err(FlowError::domain(format!("K must be >= 0, got {k}")));
    }
    if t >= big_t {
        return Err(FlowError::domain(format!("query time {t} not before singular time {big_t}")));
    }
    if e_t < e_big_t {
        return Err(FlowError::domain(format!("E(t) = {e_t} below limit energy {e_big_t}")));
    }
    Ok(k * (big_t - t) * (e_t - e_big_t))
}

impl PinchingThreshold {
    pub fn evaluate(k: f64, big_t: f64, t: f64, e_t: f64, e_big_t: f64) -> Result<Self> {
        let value = pinching_threshold(k, big_t, t, e_t, e_big_t)?;
        Ok(Self { k, singular_time: big_t, energy_at_t: e_t, limit_energy: e_big_t, value })
    }
}

/// Outcome of fitting `ell(t) <= C (T - t)(E(t) - E_T)` to a history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DecayFit {
    Fitted { constant: f64 },
    /// No finite constant works, or the energy never moved.
    BoundVacuous,
}

/// One sample `(t, ell(t), E(t))` of a pinching history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthSample {
    pub t: f64,
    pub ell: f64,
    pub energy: f64,
}

/// Least `C` with `ell(t) <= C (T - t)(E(t) - E_T)` over the history.
pub fn geodesic_length_decay_fit(history: &[LengthSample], big_t: f64, e_big_t: f64) -> Result<DecayFit> {
    if history.is_empty() {
        return Err(FlowError::invalid("empty length history"));
    }
    if history.iter().any(|s| s.t >= big_t) {
        return Err(FlowError::domain("history samples must precede the singular time"));
    }
    if history.iter().all(|s| s.energy == e_big_t) {
        return Ok(DecayFit::BoundVacuous);
    }
    let mut c: f64 = 0.0;
    for s in history {
        let denom = (big_t - s.t) * (s.energy - e_big_t);
        if denom > 0.0 {
            c = c.max(s.ell / denom);
        } else if s.ell > 0.0 {
            return Ok(DecayFit::BoundVacuous);
        }
    }
    Ok(DecayFit::Fitted { constant: c })
}

/// Topological type of a (possibly punctured) surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceTopology {
    pub genus: u32,
    pub punctures: u32,
    #[serde(default = "one")]
    pub components: u32,
}

fn one() -> u32 {
    1
}

impl SurfaceTopology {
    pub fn new(genus: u32, punctures: u32) -> Self {
        Self { genus, punctures, components: 1 }
    }

    pub fn euler_characteristic(&self) -> i64 {
        2 * self.components as i64 - 2 * self.genus as i64 - self.punctures as i64
    }

    pub fn is_punctured_sphere(&self) -> bool {
        self.components == 1 && self.genus == 0
    }
}

/// Area of a complete finite-area hyperbolic metric, `-2 pi chi`.
///
/// `2 pi (n - 2)` for an `n`-punctured sphere and `4 pi (g - 1)` for a closed
/// surface of genus `g >= 2`.
pub fn gauss_bonnet_area(topology: SurfaceTopology) -> Result<f64> {
    let chi = topology.euler_characteristic();
    if topology.components == 0 || chi >= 0 {
        return Err(FlowError::domain(format!(
            "no hyperbolic metric on genus {} with {} punctures (chi = {chi})",
            topology.genus, topology.punctures
        )));
    }
    Ok(-2.0 * PI * chi as f64)
}

/// Bookkeeping for `k` collars pinching on a closed genus-`genus` surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerationModel {
    pub genus: u32,
    pub pinched: u32,
    pub puncture_count: u32,
    pub components: Vec<SurfaceTopology>,
}

impl DegenerationModel {
    /// Validates `1 <= k <= 3(genus - 1)`, that the limit pieces carry exactly
    /// `2k` punctures and that regluing `k` cylinders recovers the genus.
    pub fn new(genus: u32, pinched: u32, components: Vec<SurfaceTopology>) -> Result<Self> {
        if genus < 2 {
            return Err(FlowError::domain("collar degeneration needs genus >= 2"));
        }
        if pinched == 0 || pinched > 3 * (genus - 1) {
            return Err(FlowError::domain(format!(
                "number of pinching collars {pinched} outside 1..={}",
                3 * (genus - 1)
            )));
        }
        if components.is_empty() {
            return Err(FlowError::domain("degeneration needs at least one limit component"));
        }
        let punctures: u32 = components.iter().map(|c| c.punctures).sum();
        if punctures != 2 * pinched {
            return Err(FlowError::domain(format!(
                "limit components carry {punctures} punctures, expected 2k = {}",
                2 * pinched
            )));
        }
        for c in &components {
            if c.components != 1 || c.euler_characteristic() >= 0 {
                return Err(FlowError::domain(format!(
                    "limit component (genus {}, {} punctures) is not hyperbolic",
                    c.genus, c.punctures
                )));
            }
        }
        let glued_genus =
            components.iter().map(|c| c.genus as i64).sum::<i64>() + pinched as i64 - components.len() as i64 + 1;
        if glued_genus != genus as i64 {
            return Err(FlowError::domain(format!(
                "regluing {pinched} cylinders into {} components gives genus {glued_genus}, not {genus}",
                components.len()
            )));
        }
        Ok(Self { genus, pinched, puncture_count: 2 * pinched, components })
    }

    pub fn sphere_components(&self) -> impl Iterator<Item = &SurfaceTopology> {
        self.components.iter().filter(|c| c.is_punctured_sphere())
    }
}

/// Samples of `rho_ell` on a uniform `n_s x n_theta` grid over `[-X, X] x S^1`,
/// rows indexed by `s`.
#[derive(Debug, Clone)]
pub struct CollarSamples {
    pub n_s: usize,
    pub n_theta: usize,
    pub h_s: f64,
    pub h_theta: f64,
    pub rho: Vec<f64>,
}

impl CollarSamples {
    pub fn sample(ell: f64, half_length: f64, n_s: usize, n_theta: usize) -> Result<Self> {
        if n_s < 2 || n_theta < 1 {
            return Err(FlowError::invalid("collar grid needs n_s >= 2 and n_theta >= 1"));
        }
        let h_s = 2.0 * half_length / (n_s - 1) as f64;
        let h_theta = 2.0 * PI / n_theta as f64;
        let mut rho = Vec::with_capacity(n_s * n_theta);
        for j in 0..n_s {
            let s = -half_length + j as f64 * h_s;
            let r = collar_conformal_factor(ell, s)?;
            rho.extend(std::iter::repeat_n(r, n_theta));
        }
        Ok(Self { n_s, n_theta, h_s, h_theta, rho })
    }
}

/// Max of `|K + 1|` where `K = -rho^-2 Lap_flat(log rho)` is evaluated with
/// centred second differences at interior rows (periodic in `theta`).
pub fn liouville_curvature_residual(samples: &CollarSamples) -> Result<f64> {
    let CollarSamples { n_s, n_theta, h_s, h_theta, ref rho } = *samples;
    if n_s < 8 || n_theta < 8 {
        return Err(FlowError::invalid(format!(
            "grid {n_s}x{n_theta} too coarse for curvature differences (need >= 8 per direction)"
        )));
    }
    if rho.len() != n_s * n_theta || rho.iter().any(|r| !(*r > 0.0)) {
        return Err(FlowError::invalid("conformal factor samples must be positive and match the grid"));
    }
    let log_rho: Vec<f64> = rho.iter().map(|r| r.ln()).collect();
    let at = |j: usize, i: usize| log_rho[j * n_theta + i];
    let mut worst: f64 = 0.0;
    for j in 1..n_s - 1 {
        for i in 0..n_theta {
            let ip = (i + 1) % n_theta;
            let im = (i + n_theta - 1) % n_theta;
            let lap = (at(j + 1, i) - 2.0 * at(j, i) + at(j - 1, i)) / (h_s * h_s)
                + (at(j, ip) - 2.0 * at(j, i) + at(j, im)) / (h_theta * h_theta);
            let r = rho[j * n_theta + i];
            let k = -lap / (r * r);
            worst = worst.max((k + 1.0).abs());
        }
    }
    Ok(worst)
}

/// One row of the `collar-table` output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollarRow {
    pub ell: f64,
    pub delta: f64,
    pub half_length: f64,
    pub rho_min: f64,
    pub rho_boundary: f64,
    /// `NaN` when the sub-collar is empty.
    pub identity_residual: f64,
}

pub fn collar_table(ells: &[f64], deltas: &[f64]) -> Result<Vec<CollarRow>> {
    let mut rows = Vec::with_capacity(ells.len() * deltas.len());
    for &ell in ells {
        for &delta in deltas {
            let c = CollarGeometry::new(ell, delta)?;
            rows.push(CollarRow {
                ell,
                delta,
                half_length: c.half_length,
                rho_min: c.rho_min(),
                rho_boundary: c.rho_boundary(),
                identity_residual: c.identity_residual().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

/// CSV with header `ell,delta,X,rho_min,rho_boundary,identity_residual`.
pub fn collar_table_csv(rows: &[CollarRow]) -> String {
    let mut out = String::from("ell,delta,X,rho_min,rho_boundary,identity_residual\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.ell, r.delta, r.half_length, r.rho_min, r.rho_boundary, r.identity_residual
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn empty_subcollar_below_and_at_threshold() {
        assert_eq!(collar_half_length(0.2, 0.1).unwrap(), 0.0);
        assert_eq!(collar_half_length(0.2, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn half_length_matches_high_precision_value() {
        // mpmath, 30 digits: 955.583642253025474148...
        let x = collar_half_length(0.01, 0.1).unwrap();
        assert_relative_eq!(x, 955.583_642_253_025_5, max_relative = 1e-13);
    }

    #[test]
    fn half_length_blows_up_as_ell_shrinks() {
        let mut prev = 0.0;
        for k in 1..12 {
            let ell = 0.19 * 0.5f64.powi(k);
            let x = collar_half_length(ell, 0.1).unwrap();
            assert!(x > prev && x.is_finite());
            prev = x;
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(collar_half_length(0.0, 0.1).is_err());
        assert!(collar_half_length(0.1, -1.0).is_err());
        assert!(collar_half_length(f64::NAN, 0.1).is_err());
        assert!(collar_conformal_factor(0.1, PI * PI / 0.1).is_err());
        assert!(collar_conformal_factor(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn rho_at_centre_and_boundary() {
        assert_relative_eq!(collar_conformal_factor(0.1, 0.0).unwrap(), 0.1 / (2.0 * PI), max_relative = 1e-15);
        for &(ell, delta) in &[(0.1, 0.3), (0.01, 0.05), (0.5, 0.8)] {
            let c = CollarGeometry::new(ell, delta).unwrap();
            let expect = ell * f64::sinh(delta) / (2.0 * PI * f64::sinh(ell / 2.0));
            assert_relative_eq!(c.rho_boundary(), expect, max_relative = 1e-12);
        }
        for s in [0.3, 1.7, 10.0, 40.0] {
            assert_eq!(collar_conformal_factor(0.1, s).unwrap(), collar_conformal_factor(0.1, -s).unwrap());
        }
    }

    #[test]
    fn rho_bounded_by_delta_on_subcollar() {
        let (ell, delta) = (0.01, 0.05);
        let x = collar_half_length(ell, delta).unwrap();
        for k in 0..=200 {
            let s = -x + 2.0 * x * k as f64 / 200.0;
            let rho = collar_injectivity_lower_bound(ell, s).unwrap();
            let inj = collar_injectivity_radius(ell, s).unwrap();
            assert!(rho <= delta, "rho {rho} > delta at s = {s}");
            assert!(rho <= inj + 1e-15);
            assert!(inj <= delta * (1.0 + 1e-12));
        }
        assert_eq!(collar_injectivity_lower_bound(0.01, 0.0).unwrap(), 0.01 / (2.0 * PI));
    }

    #[test]
    fn thin_set_matches_half_length() {
        let (ell, delta) = (0.05, 0.2);
        let x = collar_half_length(ell, delta).unwrap();
        assert_relative_eq!(collar_injectivity_radius(ell, x).unwrap(), delta, max_relative = 1e-12);
        assert!(collar_injectivity_radius(ell, 0.9 * x).unwrap() < delta);
    }

    #[test]
    fn rho_at_boundary_over_sinh_delta_tends_to_one_over_pi() {
        for ell in [1e-3, 1e-4] {
            let c = CollarGeometry::new(ell, 0.3).unwrap();
            assert_relative_eq!(c.rho_boundary() / f64::sinh(0.3), 1.0 / PI, max_relative = 1e-3);
        }
    }

    #[test]
    fn pinching_threshold_values() {
        assert_relative_eq!(pinching_threshold(10.0, 1.0, 0.9, 1.2, 1.0).unwrap(), 0.2, max_relative = 1e-12);
        assert_eq!(pinching_threshold(5.0, 1.0, 1.0 - 1e-15, 1.0, 1.0).unwrap(), 0.0);
        assert!(pinching_threshold(1.0, 1.0, 1.0, 2.0, 1.0).is_err());
        assert!(pinching_threshold(1.0, 1.0, 0.5, 0.5, 1.0).is_err());
        assert!(pinching_threshold(-1.0, 1.0, 0.5, 2.0, 1.0).is_err());
    }

    #[test]
    fn decay_fit_cases() {
        let exact: Vec<LengthSample> = (0..10)
            .map(|k| {
                let t = k as f64 * 0.09;
                let e = 1.0 + (1.0 - t);
                LengthSample { t, ell: (1.0 - t) * (e - 1.0), energy: e }
            })
            .collect();
        match geodesic_length_decay_fit(&exact, 1.0, 1.0).unwrap() {
            DecayFit::Fitted { constant } => assert_relative_eq!(constant, 1.0, max_relative = 1e-12),
            other => panic!("{other:?}"),
        }
        let zero: Vec<_> = exact.iter().map(|s| LengthSample { ell: 0.0, ..*s }).collect();
        assert_eq!(geodesic_length_decay_fit(&zero, 1.0, 1.0).unwrap(), DecayFit::Fitted { constant: 0.0 });
        let flat: Vec<_> = exact.iter().map(|s| LengthSample { energy: 1.0, ..*s }).collect();
        assert_eq!(geodesic_length_decay_fit(&flat, 1.0, 1.0).unwrap(), DecayFit::BoundVacuous);
        assert!(geodesic_length_decay_fit(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn gauss_bonnet_cases() {
        assert_relative_eq!(gauss_bonnet_area(SurfaceTopology::new(0, 3)).unwrap(), 2.0 * PI);
        assert_relative_eq!(gauss_bonnet_area(SurfaceTopology::new(0, 4)).unwrap(), 4.0 * PI);
        assert_relative_eq!(gauss_bonnet_area(SurfaceTopology::new(2, 0)).unwrap(), 4.0 * PI);
        assert!(gauss_bonnet_area(SurfaceTopology::new(0, 2)).is_err());
        assert!(gauss_bonnet_area(SurfaceTopology::new(1, 0)).is_err());
    }

    #[test]
    fn degeneration_bookkeeping() {
        // separating curve on genus 2: two once-punctured tori
        let m = DegenerationModel::new(2, 1, vec![SurfaceTopology::new(1, 1), SurfaceTopology::new(1, 1)]).unwrap();
        assert_eq!(m.puncture_count, 2);
        // pants decomposition of genus 2: two thrice-punctured spheres
        let m = DegenerationModel::new(2, 3, vec![SurfaceTopology::new(0, 3), SurfaceTopology::new(0, 3)]).unwrap();
        assert_eq!(m.puncture_count, 6);
        assert_eq!(m.sphere_components().count(), 2);
        assert!(DegenerationModel::new(2, 4, vec![SurfaceTopology::new(0, 8)]).is_err());
        assert!(DegenerationModel::new(2, 1, vec![SurfaceTopology::new(0, 2)]).is_err());
        assert!(DegenerationModel::new(3, 1, vec![SurfaceTopology::new(1, 1), SurfaceTopology::new(1, 1)]).is_err());
    }

    #[test]
    fn liouville_flat_cylinder_has_zero_curvature() {
        let s = CollarSamples { n_s: 16, n_theta: 8, h_s: 0.1, h_theta: 0.2, rho: vec![0.3; 128] };
        assert_relative_eq!(liouville_curvature_residual(&s).unwrap(), 1.0, max_relative = 1e-12);
        let coarse = CollarSamples { n_s: 7, n_theta: 8, h_s: 0.1, h_theta: 0.2, rho: vec![0.3; 56] };
        assert!(liouville_curvature_residual(&coarse).is_err());
    }

    #[test]
    fn liouville_second_order() {
        let ell = 0.1;
        let x = collar_half_length(ell, 0.07).unwrap();
        let coarse = liouville_curvature_residual(&CollarSamples::sample(ell, x, 512, 16).unwrap()).unwrap();
        let fine = liouville_curvature_residual(&CollarSamples::sample(ell, x, 1023, 16).unwrap()).unwrap();
        assert!(coarse <= 1e-5, "{coarse}");
        assert!((coarse / fine - 4.0).abs() <= 0.5, "{}", coarse / fine);
    }

    #[test]
    fn table_has_header_and_rows() {
        let rows = collar_table(&[0.1, 0.2], &[0.05, 0.5]).unwrap();
        let csv = collar_table_csv(&rows);
        assert!(csv.starts_with("ell,delta,X,rho_min,rho_boundary,identity_residual\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(rows[0].identity_residual.is_nan());
    }

    proptest! {
        #[test]
        fn identity_holds(ell in 1e-3f64..1.5, frac in 0.0f64..1.0) {
            let delta_max = 0.881_373_587_019_543; // arsinh(1)
            prop_assume!(ell / 2.0 < delta_max);
            let delta = ell / 2.0 + frac * (delta_max - ell / 2.0);
            let c = CollarGeometry::new(ell, delta).unwrap();
            if let Some(r) = c.identity_residual() {
                prop_assert!(r / (ell / 2.0).sinh() <= 1e-12);
            }
        }

        #[test]
        fn monotone_in_both_arguments(ell in 1e-3f64..1.0, d1 in 0.0f64..2.0, d2 in 0.0f64..2.0, shrink in 0.1f64..1.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let dl = ell / 2.0 + lo;
            let dh = ell / 2.0 + hi;
            prop_assert!(collar_half_length(ell, dl).unwrap() <= collar_half_length(ell, dh).unwrap() + 1e-9);
            prop_assert!(collar_half_length(ell, dl).unwrap() <= collar_half_length(ell * shrink, dl).unwrap() + 1e-9);
        }
    }
}
