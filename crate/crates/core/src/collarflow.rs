//! Map-only flow on a hyperbolic collar with a prescribed shrinking core.
//!
//! The grid covers `[-X0, X0] x S^1` in flat collar coordinates (rows `s`,
//! columns `theta`), with `X0 = X(ell0, delta0)` fixed at the start. The metric
//! at time `t` is `rho_{ell(t)}(s)^2 (ds^2 + dtheta^2)`; since `ell` only
//! decreases, the collar domain `|s| < pi^2 / ell` keeps containing the grid.
//! The first and last rows are Dirichlet data.
//!
//! Discrete flat energy (trapezoid in `s`, boundary rows weighted by 1/2 in the
//! `theta` term):
//!
//! ```text
//! E = 1/2 sum_{s-edges} (h_theta/h_s) |du|^2 + 1/2 sum_{theta-edges} w_j (h_s/h_theta) |du|^2
//! ```
//!
//! Its gradient at interior nodes is `-h_s h_theta` times the 5-point Laplacian.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::field::{dot, SphereMapField};
use crate::hypgeom::{collar_conformal_factor, collar_half_length};
use crate::io::{HistorySample, Snapshot};
use crate::sphere::{apply3, rotation_x};

/// Uniform grid on `[-half_length, half_length] x S^1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderGrid {
    pub n_s: usize,
    pub n_theta: usize,
    pub half_length: f64,
}

impl CylinderGrid {
    pub fn new(n_s: usize, n_theta: usize, half_length: f64) -> Result<Self> {
        if n_s < 3 || n_theta < 3 {
            return Err(FlowError::invalid(format!("cylinder grid {n_s}x{n_theta} too small")));
        }
        if !(half_length > 0.0) || !half_length.is_finite() {
            return Err(FlowError::invalid(format!("cylinder half-length must be > 0, got {half_length}")));
        }
        Ok(Self { n_s, n_theta, half_length })
    }

    pub fn h_s(&self) -> f64 {
        2.0 * self.half_length / (self.n_s - 1) as f64
    }

    pub fn h_theta(&self) -> f64 {
        2.0 * PI / self.n_theta as f64
    }

    pub fn s(&self, j: usize) -> f64 {
        -self.half_length + j as f64 * self.h_s()
    }

    pub fn theta(&self, i: usize) -> f64 {
        i as f64 * self.h_theta()
    }

    pub fn check(&self, u: &SphereMapField) -> Result<()> {
        if u.ny != self.n_s || u.nx != self.n_theta {
            return Err(FlowError::invalid(format!(
                "field is {}x{} (rows x cols), cylinder grid is {}x{}",
                u.ny, u.nx, self.n_s, self.n_theta
            )));
        }
        Ok(())
    }
}

/// Flat-gauge energy density summed per node; s-edges are split evenly between
/// their end nodes, so the entries add up to [`flat_energy`].
pub fn node_energy(u: &SphereMapField, grid: &CylinderGrid) -> Result<Vec<f64>> {
    grid.check(u)?;
    let (ns, nt) = (grid.n_s, grid.n_theta);
    let (hs, ht) = (grid.h_s(), grid.h_theta());
    let mut e = vec![0.0; ns * nt];
    for j in 0..ns {
        let w = if j == 0 || j == ns - 1 { 0.5 } else { 1.0 };
        for i in 0..nt {
            let ip = (i + 1) % nt;
            let dth = crate::field::dist2(u.at(ip, j), u.at(i, j));
            let half = 0.25 * w * hs / ht * dth;
            e[j * nt + i] += half;
            e[j * nt + ip] += half;
            if j + 1 < ns {
                let ds = crate::field::dist2(u.at(i, j + 1), u.at(i, j));
                let half = 0.25 * ht / hs * ds;
                e[j * nt + i] += half;
                e[(j + 1) * nt + i] += half;
            }
        }
    }
    Ok(e)
}

/// Flat-gauge Dirichlet energy.
pub fn flat_energy(u: &SphereMapField, grid: &CylinderGrid) -> Result<f64> {
    Ok(node_energy(u, grid)?.iter().sum())
}

/// Energy computed in the hyperbolic gauge: `|du|^2_g = rho^-2 |du|^2` against
/// `dv_g = rho^2 ds dtheta`, with `rho` taken at each edge midpoint.
pub fn hyperbolic_energy(u: &SphereMapField, grid: &CylinderGrid, ell: f64) -> Result<f64> {
    grid.check(u)?;
    let (ns, nt) = (grid.n_s, grid.n_theta);
    let (hs, ht) = (grid.h_s(), grid.h_theta());
    let mut total = 0.0;
    for j in 0..ns {
        let w = if j == 0 || j == ns - 1 { 0.5 } else { 1.0 };
        let rho = collar_conformal_factor(ell, grid.s(j))?;
        let rho_mid = if j + 1 < ns { collar_conformal_factor(ell, grid.s(j) + 0.5 * hs)? } else { 1.0 };
        for i in 0..nt {
            let ip = (i + 1) % nt;
            let dth = crate::field::dist2(u.at(ip, j), u.at(i, j)) / (ht * ht);
            total += 0.5 * w * (dth / (rho * rho)) * (rho * rho) * hs * ht;
            if j + 1 < ns {
                let ds = crate::field::dist2(u.at(i, j + 1), u.at(i, j)) / (hs * hs);
                total += 0.5 * (ds / (rho_mid * rho_mid)) * (rho_mid * rho_mid) * hs * ht;
            }
        }
    }
    Ok(total)
}

/// Tangential part of the flat 5-point Laplacian; zero on the boundary rows.
pub fn flat_tension(u: &SphereMapField, grid: &CylinderGrid) -> Result<Vec<f64>> {
    grid.check(u)?;
    let (ns, nt, c) = (grid.n_s, grid.n_theta, u.comps);
    let (ihs2, iht2) = (grid.h_s().powi(-2), grid.h_theta().powi(-2));
    let mut out = vec![0.0; u.data.len()];
    out.par_chunks_mut(nt * c).enumerate().for_each(|(j, row)| {
        if j == 0 || j == ns - 1 {
            return;
        }
        for i in 0..nt {
            let ip = (i + 1) % nt;
            let im = (i + nt - 1) % nt;
            let (u0, ue, uw, un, us) = (u.at(i, j), u.at(ip, j), u.at(im, j), u.at(i, j + 1), u.at(i, j - 1));
            let t = &mut row[i * c..(i + 1) * c];
            for k in 0..c {
                t[k] = (un[k] - 2.0 * u0[k] + us[k]) * ihs2 + (ue[k] - 2.0 * u0[k] + uw[k]) * iht2;
            }
            let s = dot(t, u0);
            for k in 0..c {
                t[k] -= s * u0[k];
            }
        }
    });
    Ok(out)
}

/// Both sides of `|tau_flat|_{L^2(flat)} <= sup rho |tau_g|_{L^2(g)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensionScaling {
    pub flat_l2: f64,
    pub sup_rho: f64,
    pub hyperbolic_l2: f64,
    /// `sup_rho * hyperbolic_l2 - flat_l2`.
    pub margin: f64,
}

/// Evaluates the tension scaling over interior rows `rows` (all interior rows
/// when `None`). `tau_g = rho^-2 tau_flat` and `dv_g = rho^2 dv_flat`.
pub fn flat_gauge_tension(
    u: &SphereMapField,
    grid: &CylinderGrid,
    ell: f64,
    rows: Option<std::ops::Range<usize>>,
) -> Result<TensionScaling> {
    let tau = flat_tension(u, grid)?;
    let rows = rows.unwrap_or(1..grid.n_s - 1);
    let (nt, c) = (grid.n_theta, u.comps);
    let da = grid.h_s() * grid.h_theta();
    let (mut flat, mut hyp, mut sup_rho) = (0.0, 0.0, 0.0f64);
    for j in rows {
        if j == 0 || j >= grid.n_s - 1 {
            continue;
        }
        let rho = collar_conformal_factor(ell, grid.s(j))?;
        sup_rho = sup_rho.max(rho);
        let row: f64 = tau[j * nt * c..(j + 1) * nt * c].iter().map(|v| v * v).sum();
        flat += row * da;
        let tg2 = row / rho.powi(4);
        hyp += tg2 * rho * rho * da;
    }
    let (flat_l2, hyperbolic_l2) = (flat.sqrt(), hyp.sqrt());
    Ok(TensionScaling { flat_l2, sup_rho, hyperbolic_l2, margin: sup_rho * hyperbolic_l2 - flat_l2 })
}

/// Energy on the `delta`-thin sub-cylinder `{|s| <= X(ell, delta)}`; empty
/// when `X = 0`.
pub fn thin_part_energy(u: &SphereMapField, grid: &CylinderGrid, ell: f64, delta: f64) -> Result<f64> {
    let x = collar_half_length(ell, delta)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    let e = node_energy(u, grid)?;
    Ok(window_energy(&e, grid, |s| s.abs() <= x))
}

pub(crate) fn window_energy(node_e: &[f64], grid: &CylinderGrid, keep: impl Fn(f64) -> bool) -> f64 {
    let nt = grid.n_theta;
    let mut total = 0.0;
    for j in 0..grid.n_s {
        if keep(grid.s(j)) {
            total += node_e[j * nt..(j + 1) * nt].iter().sum::<f64>();
        }
    }
    total
}

/// Prescribed core length `ell(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `ell0 (1 - t/T)`.
    #[default]
    Linear,
    /// `ell0` for all times.
    Frozen,
}

impl Schedule {
    pub fn ell(&self, ell0: f64, big_t: f64, t: f64) -> f64 {
        match self {
            Schedule::Linear => ell0 * (1.0 - t / big_t),
            Schedule::Frozen => ell0,
        }
    }
}

/// Initial map on the cylinder; its first and last rows become the boundary loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum CollarInitial {
    Constant,
    /// `theta -> (cos theta, sin theta, 0)` on every circle.
    EquatorWrap,
    /// Meridian arc from the north pole at `s = -X` to polar angle `angle` at
    /// `s = X`, plus a `theta`-dependent wiggle of size `wiggle` that vanishes
    /// on the boundary.
    Interpolate {
        #[serde(default = "default_angle")]
        angle: f64,
        #[serde(default = "default_wiggle")]
        wiggle: f64,
    },
    /// Degree-one bubble centred at `center`, composed with a rotation by
    /// `twist * s` about the first axis so that the ends trace a great circle.
    Bubble {
        #[serde(default)]
        center: f64,
        #[serde(default = "default_twist")]
        twist: f64,
    },
    /// Two bubbles at `center -/+ separation/2` joined through a neck.
    TwoBubbles {
        #[serde(default)]
        center: f64,
        separation: f64,
    },
}

fn default_angle() -> f64 {
    PI / 2.0
}
fn default_wiggle() -> f64 {
    0.3
}
fn default_twist() -> f64 {
    0.02
}

/// `(sech s cos theta, sech s sin theta, tanh s)`: the conformal map of the
/// cylinder onto the sphere minus the poles.
pub fn cylinder_bubble(s: f64, theta: f64) -> [f64; 3] {
    let sech = 1.0 / s.cosh();
    [sech * theta.cos(), sech * theta.sin(), s.tanh()]
}

impl CollarInitial {
    pub fn build(&self, grid: &CylinderGrid, target_dim: usize) -> Result<SphereMapField> {
        let comps = target_dim + 1;
        let needs_s2 = !matches!(self, CollarInitial::Constant | CollarInitial::EquatorWrap);
        if needs_s2 && comps != 3 {
            return Err(FlowError::invalid("this collar preset needs target S^2"));
        }
        let x = grid.half_length;
        SphereMapField::from_fn(grid.n_theta, grid.n_s, comps, |i, j, o| {
            let (s, th) = (grid.s(j), grid.theta(i));
            match self {
                CollarInitial::Constant => o[comps - 1] = 1.0,
                CollarInitial::EquatorWrap => {
                    o[0] = th.cos();
                    o[1] = th.sin();
                }
                CollarInitial::Interpolate { angle, wiggle } => {
                    let r = (s + x) / (2.0 * x);
                    let bump = wiggle * (PI * r).sin();
                    let phi = angle * r + bump * th.cos();
                    let psi = bump * th.sin();
                    o[0] = phi.sin() * psi.cos();
                    o[1] = psi.sin();
                    o[2] = phi.cos() * psi.cos();
                }
                CollarInitial::Bubble { center, twist } => {
                    let v = apply3(&rotation_x(twist * s), &cylinder_bubble(s - center, th));
                    o.copy_from_slice(&v);
                }
                CollarInitial::TwoBubbles { center, separation } => {
                    let v = if s <= *center {
                        cylinder_bubble(s - (center - 0.5 * separation), th)
                    } else {
                        cylinder_bubble(center + 0.5 * separation - s, th)
                    };
                    o.copy_from_slice(&v);
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollarConfig {
    pub ell0: f64,
    /// Thinness threshold fixing the grid window `X0 = X(ell0, delta0)`.
    pub delta0: f64,
    /// Time at which the schedule reaches `ell = 0`.
    #[serde(rename = "T")]
    pub big_t: f64,
    pub schedule: Schedule,
    pub n_s: usize,
    pub n_theta: usize,
    pub target_dim: usize,
    pub cfl_factor: f64,
    /// Fixed step; by default each step uses `cfl_factor h^2 rho_min^2` for
    /// the metric at the end of the step.
    pub dt: Option<f64>,
    /// The run ends "pinched" once `ell <= pinch_ratio * ell0`.
    pub pinch_ratio: f64,
    pub max_time: Option<f64>,
    /// Threshold for the thin-part energy recorded in the diagnostics.
    pub delta_report: f64,
    pub sample_every: usize,
    pub snapshot_every: usize,
    pub initial: CollarInitial,
}

impl Default for CollarConfig {
    fn default() -> Self {
        Self {
            ell0: 0.2,
            delta0: 0.5,
            big_t: 0.005,
            schedule: Schedule::Linear,
            n_s: 347,
            n_theta: 32,
            target_dim: 2,
            cfl_factor: 0.2,
            dt: None,
            pinch_ratio: 0.1,
            max_time: None,
            delta_report: 0.1,
            sample_every: 50,
            snapshot_every: 0,
            initial: CollarInitial::Bubble { center: 0.0, twist: default_twist() },
        }
    }
}

impl CollarConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.ell0 > 0.0) || !self.ell0.is_finite() {
            v.push(format!("ell0 must be finite and > 0, got {}", self.ell0));
        }
        if !(self.delta0 > 0.0) || !self.delta0.is_finite() {
            v.push(format!("delta0 must be finite and > 0, got {}", self.delta0));
        } else if self.ell0 > 0.0 && 2.0 * self.delta0 <= self.ell0 {
            v.push(format!("delta0 = {} gives an empty sub-collar for ell0 = {}", self.delta0, self.ell0));
        }
        if !(self.big_t > 0.0) || !self.big_t.is_finite() {
            v.push(format!("T must be finite and > 0, got {}", self.big_t));
        }
        if self.n_s < 8 || self.n_theta < 8 {
            v.push(format!("grid {}x{} too small (need >= 8 each way)", self.n_s, self.n_theta));
        }
        if self.target_dim < 1 {
            v.push("target_dim must be >= 1".into());
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 0.25) {
            v.push(format!("cfl_factor must lie in (0, 0.25], got {}", self.cfl_factor));
        }
        if !(self.pinch_ratio > 0.0 && self.pinch_ratio < 1.0) {
            v.push(format!("pinch_ratio must lie in (0, 1), got {}", self.pinch_ratio));
        }
        if let Some(t) = self.max_time {
            if !(t > 0.0) {
                v.push(format!("max_time must be > 0, got {t}"));
            }
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                v.push(format!("dt must be > 0, got {dt}"));
            }
        }
        if !(self.delta_report > 0.0) {
            v.push(format!("delta_report must be > 0, got {}", self.delta_report));
        }
        if self.sample_every == 0 {
            v.push("sample_every must be >= 1".into());
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

    pub fn grid(&self) -> Result<CylinderGrid> {
        CylinderGrid::new(self.n_s, self.n_theta, collar_half_length(self.ell0, self.delta0)?)
    }

    pub fn ell(&self, t: f64) -> f64 {
        self.schedule.ell(self.ell0, self.big_t, t)
    }

    /// CFL limit `cfl h^2 min rho^2` for core length `ell`.
    pub fn cfl_limit(&self, grid: &CylinderGrid, ell: f64) -> f64 {
        let h = grid.h_s().min(grid.h_theta());
        let rho_min = ell / (2.0 * PI);
        self.cfl_factor * h * h * rho_min * rho_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollarFlowState {
    pub time: f64,
    pub ell: f64,
    pub u: SphereMapField,
}

impl CollarFlowState {
    pub fn snapshot(&self, grid: &CylinderGrid) -> Snapshot {
        Snapshot { cylinder: true, a: self.ell, b: grid.half_length, time: self.time, field: self.u.clone() }
    }

    /// State and grid stored in a cylinder snapshot.
    pub fn from_snapshot(s: Snapshot) -> Result<(Self, CylinderGrid)> {
        if !s.cylinder {
            return Err(FlowError::Format("snapshot is a torus snapshot, not a cylinder one".into()));
        }
        let grid = CylinderGrid::new(s.field.ny, s.field.nx, s.b)?;
        Ok((Self { time: s.time, ell: s.a, u: s.field }, grid))
    }
}

fn euler(u: &SphereMapField, tau: &[f64], rho_inv2: &[f64], dt: f64) -> SphereMapField {
    let c = u.comps;
    let row_len = u.nx * c;
    let mut next = u.clone();
    for (j, (row, trow)) in next.data.chunks_mut(row_len).zip(tau.chunks(row_len)).enumerate() {
        let k = dt * rho_inv2[j];
        for (x, t) in row.iter_mut().zip(trow) {
            *x += k * t;
        }
    }
    next.renormalize();
    next
}

fn rho_inv2(grid: &CylinderGrid, ell: f64) -> Result<Vec<f64>> {
    (0..grid.n_s).map(|j| collar_conformal_factor(ell, grid.s(j)).map(|r| 1.0 / (r * r))).collect()
}

/// Explicit midpoint step of `dt u = rho^-2 tau_flat(u)` with the metric frozen
/// at `ell_mid`, followed by renormalization. Boundary rows are copied back
/// from `state` so they stay bit-identical.
pub fn step_map_on_collar(
    state: &CollarFlowState,
    grid: &CylinderGrid,
    dt: f64,
    ell_mid: f64,
    cfl_limit: f64,
) -> Result<SphereMapField> {
    if !(dt > 0.0) || dt > cfl_limit {
        return Err(FlowError::Cfl { dt, limit: cfl_limit });
    }
    let w = rho_inv2(grid, ell_mid)?;
    let tau0 = flat_tension(&state.u, grid)?;
    let mid = euler(&state.u, &tau0, &w, 0.5 * dt);
    let tau1 = flat_tension(&mid, grid)?;
    let mut next = euler(&state.u, &tau1, &w, dt);
    let row_len = grid.n_theta * state.u.comps;
    let last = (grid.n_s - 1) * row_len;
    next.data[..row_len].copy_from_slice(&state.u.data[..row_len]);
    next.data[last..].copy_from_slice(&state.u.data[last..]);
    if !next.is_finite() {
        return Err(FlowError::NumericalAbort {
            time: state.time,
            reason: "non-finite value in collar step".into(),
            snapshot: Some(state.snapshot(grid).encode()),
        });
    }
    Ok(next)
}

/// Per-sample collar diagnostics beyond the shared history columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollarSample {
    pub t: f64,
    pub ell: f64,
    pub energy_flat: f64,
    pub energy_hyperbolic: f64,
    /// `X(ell, delta_report)`.
    pub thin_half_length: f64,
    pub thin_energy: f64,
    pub tension_flat_l2: f64,
    pub sup_rho_tension_l2: f64,
    pub margin: f64,
}

pub const COLLAR_HEADER: &str =
    "t,ell,E_flat,E_g,X_thin,E_thin,tension_flat_l2,sup_rho_tension_g_l2,margin";

pub fn collar_csv(samples: &[CollarSample]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from(COLLAR_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.t,
            s.ell,
            s.energy_flat,
            s.energy_hyperbolic,
            s.thin_half_length,
            s.thin_energy,
            s.tension_flat_l2,
            s.sup_rho_tension_l2,
            s.margin
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollarStop {
    Pinched,
    Timeout,
}

#[derive(Debug, Clone)]
pub struct CollarRun {
    pub grid: CylinderGrid,
    /// Shared history columns: `a = ell(t)`, `b = X0`, `inj = ell/2` (the core
    /// geodesic), `tension_l2 = |tau_g|_{L^2(g)}`; projection and speed are 0
    /// because the metric is prescribed.
    pub history: Vec<HistorySample>,
    pub collar: Vec<CollarSample>,
    pub snapshots: Vec<CollarFlowState>,
    pub final_state: CollarFlowState,
    pub status: CollarStop,
    pub steps: u64,
}

fn sample(state: &CollarFlowState, grid: &CylinderGrid, cfg: &CollarConfig) -> Result<(HistorySample, CollarSample)> {
    let energy_flat = flat_energy(&state.u, grid)?;
    let energy_hyperbolic = hyperbolic_energy(&state.u, grid, state.ell)?;
    let ts = flat_gauge_tension(&state.u, grid, state.ell, None)?;
    let thin_half_length = collar_half_length(state.ell, cfg.delta_report)?;
    let thin_energy = thin_part_energy(&state.u, grid, state.ell, cfg.delta_report)?;
    let h = HistorySample {
        t: state.time,
        energy: energy_flat,
        tension_l2: ts.hyperbolic_l2,
        projection_l2: 0.0,
        a: state.ell,
        b: grid.half_length,
        inj: 0.5 * state.ell,
        speed_l2: 0.0,
    };
    let c = CollarSample {
        t: state.time,
        ell: state.ell,
        energy_flat,
        energy_hyperbolic,
        thin_half_length,
        thin_energy,
        tension_flat_l2: ts.flat_l2,
        sup_rho_tension_l2: ts.sup_rho * ts.hyperbolic_l2,
        margin: ts.margin,
    };
    Ok((h, c))
}

/// Runs the collar flow from the configured initial map.
pub fn run_collar(cfg: &CollarConfig) -> Result<CollarRun> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let u = cfg.initial.build(&grid, cfg.target_dim)?;
    run_collar_from(cfg, CollarFlowState { time: 0.0, ell: cfg.ell0, u })
}

pub fn run_collar_from(cfg: &CollarConfig, initial: CollarFlowState) -> Result<CollarRun> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    grid.check(&initial.u)?;
    let max_time = cfg.max_time.unwrap_or(cfg.big_t);
    let pinch_ell = cfg.pinch_ratio * cfg.ell0;
    let mut state = initial;
    let (h0, c0) = sample(&state, &grid, cfg)?;
    let (mut history, mut collar) = (vec![h0], vec![c0]);
    let mut snapshots = Vec::new();
    let mut steps: u64 = 0;
    let mut last_sampled = true;
    let status = loop {
        if cfg.schedule == Schedule::Linear && state.ell <= pinch_ell {
            break CollarStop::Pinched;
        }
        if state.time >= max_time {
            break CollarStop::Timeout;
        }
        let dt = match cfg.dt {
            Some(dt) => dt,
            None => {
                // the step must respect the CFL bound of the thinner end-of-step metric
                let mut dt = cfg.cfl_limit(&grid, state.ell);
                for _ in 0..4 {
                    dt = cfg.cfl_limit(&grid, cfg.ell(state.time + dt).max(f64::MIN_POSITIVE));
                }
                0.999 * dt
            }
        };
        let dt = dt.min(max_time - state.time).max(f64::MIN_POSITIVE);
        let ell_end = cfg.ell(state.time + dt);
        if !(ell_end > 0.0) {
            break CollarStop::Pinched;
        }
        let limit = cfg.cfl_limit(&grid, ell_end);
        let ell_mid = cfg.ell(state.time + 0.5 * dt);
        let u = step_map_on_collar(&state, &grid, dt, ell_mid, limit)?;
        steps += 1;
        state = CollarFlowState { time: state.time + dt, ell: ell_end, u };
        last_sampled = steps.is_multiple_of(cfg.sample_every as u64);
        if last_sampled {
            let (h, c) = sample(&state, &grid, cfg)?;
            history.push(h);
            collar.push(c);
        }
        if cfg.snapshot_every > 0 && steps.is_multiple_of(cfg.snapshot_every as u64) {
            snapshots.push(state.clone());
        }
    };
    if !last_sampled {
        let (h, c) = sample(&state, &grid, cfg)?;
        history.push(h);
        collar.push(c);
    }
    if snapshots.last().map(|s| s.time) != Some(state.time) {
        snapshots.push(state.clone());
    }
    Ok(CollarRun { grid, history, collar, snapshots, final_state: state, status, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn small_grid() -> CylinderGrid {
        CylinderGrid::new(41, 16, 10.0).unwrap()
    }

    #[test]
    fn node_energy_partitions_the_total() {
        let g = small_grid();
        let u = CollarInitial::Interpolate { angle: 1.0, wiggle: 0.4 }.build(&g, 2).unwrap();
        let e = node_energy(&u, &g).unwrap();
        assert!(e.iter().all(|v| *v >= 0.0));
        assert_relative_eq!(e.iter().sum::<f64>(), flat_energy(&u, &g).unwrap(), max_relative = 1e-14);
    }

    #[test]
    fn energy_gauges_agree() {
        let g = small_grid();
        let u = CollarInitial::Bubble { center: 1.0, twist: 0.05 }.build(&g, 2).unwrap();
        let ef = flat_energy(&u, &g).unwrap();
        let eg = hyperbolic_energy(&u, &g, 0.1).unwrap();
        assert!((ef - eg).abs() <= 1e-10 * ef);
    }

    #[test]
    fn constant_and_equator_wrap_are_fixed_points() {
        let g = small_grid();
        for init in [CollarInitial::Constant, CollarInitial::EquatorWrap] {
            let u = init.build(&g, 2).unwrap();
            let st = CollarFlowState { time: 0.0, ell: 0.1, u: u.clone() };
            let next = step_map_on_collar(&st, &g, 1e-7, 0.1, 1.0).unwrap();
            assert!(next.data.iter().zip(&u.data).all(|(a, b)| (a - b).abs() <= 1e-13));
            let tau = flat_tension(&u, &g).unwrap();
            assert!(tau.iter().all(|v| v.abs() <= 1e-10));
        }
    }

    #[test]
    fn boundary_rows_are_bit_identical() {
        let g = small_grid();
        let u = CollarInitial::Interpolate { angle: 1.0, wiggle: 0.4 }.build(&g, 2).unwrap();
        let st = CollarFlowState { time: 0.0, ell: 0.3, u: u.clone() };
        let next = step_map_on_collar(&st, &g, 1e-5, 0.3, 1.0).unwrap();
        let row = 16 * 3;
        assert_eq!(&next.data[..row], &u.data[..row]);
        assert_eq!(&next.data[40 * row..], &u.data[40 * row..]);
        assert_ne!(&next.data[row..2 * row], &u.data[row..2 * row]);
    }

    #[test]
    fn tension_inequality_on_random_state() {
        let g = small_grid();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let u = SphereMapField::from_fn(16, 41, 3, |_, _, o| {
            for v in o.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        })
        .unwrap();
        let ts = flat_gauge_tension(&u, &g, 0.05, None).unwrap();
        assert!(ts.margin > 0.0);
        // on a single row rho is constant and the two sides coincide
        let one = flat_gauge_tension(&u, &g, 0.05, Some(20..21)).unwrap();
        assert!(one.margin.abs() <= 1e-10 * one.flat_l2);
        let zero = flat_gauge_tension(&CollarInitial::Constant.build(&g, 2).unwrap(), &g, 0.05, None).unwrap();
        assert_eq!((zero.flat_l2, zero.hyperbolic_l2), (0.0, 0.0));
    }

    #[test]
    fn thin_energy_of_equator_wrap() {
        let g = CylinderGrid::new(201, 64, 50.0).unwrap();
        let u = CollarInitial::EquatorWrap.build(&g, 2).unwrap();
        let (ell, delta) = (0.1, 0.07);
        let x = collar_half_length(ell, delta).unwrap();
        let rows = (0..g.n_s).filter(|&j| g.s(j).abs() <= x).count();
        let window = rows as f64 * g.h_s();
        let thin = thin_part_energy(&u, &g, ell, delta).unwrap();
        assert_relative_eq!(thin, PI * window, max_relative = 1e-3);
        assert_eq!(thin_part_energy(&u, &g, 0.1, 0.04).unwrap(), 0.0);
        let c = CollarInitial::Constant.build(&g, 2).unwrap();
        assert_eq!(thin_part_energy(&c, &g, ell, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn thin_window_grows_along_the_schedule() {
        let cfg = CollarConfig::default();
        let mut prev = 0.0;
        for k in 1..=6 {
            let rem = cfg.big_t * 10f64.powi(-k);
            let t = cfg.big_t - rem;
            let x = collar_half_length(cfg.ell(t), rem.sqrt()).unwrap();
            assert!(x > prev);
            prev = x;
        }
        assert!(prev > 1e4);
    }

    #[test]
    fn bubble_energy_is_four_pi() {
        let g = CylinderGrid::new(401, 64, 20.0).unwrap();
        let u = CollarInitial::Bubble { center: 0.0, twist: 0.0 }.build(&g, 2).unwrap();
        assert_relative_eq!(flat_energy(&u, &g).unwrap(), 4.0 * PI, max_relative = 2e-3);
    }

    #[test]
    fn interpolating_map_relaxes() {
        let cfg = CollarConfig {
            ell0: 0.5,
            delta0: 0.6,
            big_t: 1.0,
            schedule: Schedule::Frozen,
            n_s: 41,
            n_theta: 16,
            max_time: Some(0.02),
            sample_every: 20,
            initial: CollarInitial::Interpolate { angle: 1.0, wiggle: 0.4 },
            ..CollarConfig::default()
        };
        let run = run_collar(&cfg).unwrap();
        assert_eq!(run.status, CollarStop::Timeout);
        let e: Vec<f64> = run.history.iter().map(|h| h.energy).collect();
        assert!(e.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(e.last().unwrap() < &(0.9 * e[0]));
        assert!(run.collar.iter().all(|c| c.margin >= -1e-12));
    }

    #[test]
    fn config_errors_are_collected() {
        let cfg = CollarConfig { ell0: -1.0, n_s: 2, pinch_ratio: 2.0, ..CollarConfig::default() };
        assert_eq!(cfg.violations().len(), 3);
    }
}
