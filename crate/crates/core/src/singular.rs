//! Singularity analysis: cut-off energies, the epsilon-regularity gate,
//! concentration points, good times, bubble extraction, bubble branches on
//! long cylinders and the thick/thin energy ledger.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::collarflow::{self, CollarFlowState, CollarRun, CylinderGrid};
use crate::error::{FlowError, Result};
use crate::field::{dist2, SphereMapField};
use crate::hypgeom::collar_half_length;
use crate::io::HistorySample;
use crate::torusflow::{energy_density, tension_field, FlowState, TorusModulus};

/// Default concentration threshold for round `S^2` targets, below the
/// smallest bubble energy `4 pi`.
pub const DEFAULT_EPS0: f64 = 1.0;
pub const DEFAULT_LADDER: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
pub const DEFAULT_LATE_SNAPSHOTS: usize = 5;
pub const DEFAULT_OSC_THRESHOLD: f64 = 0.1;
pub const DEFAULT_LAMBDA_TRIM: usize = 5;

/// Energy of a degree-one bubble, `4 pi`.
pub const BUBBLE_ENERGY: f64 = 4.0 * PI;

/// Energy-centroid offset, in units of the scale, beyond which a candidate
/// window is flagged as misaligned.
pub const MISALIGNED_OFFSET: f64 = 1.5;

/// Cut-off profile: 1 on `[0, 1/2]`, 0 on `[1, inf)`, quintic smoothstep in
/// between, `|psi'| <= 3.75`.
pub fn psi(t: f64) -> f64 {
    if t <= 0.5 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        let x = 2.0 * (t - 0.5);
        1.0 - x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
    }
}

pub fn psi_prime(t: f64) -> f64 {
    if t <= 0.5 || t >= 1.0 {
        0.0
    } else {
        let x = 2.0 * (t - 0.5);
        -2.0 * 30.0 * x * x * (1.0 - x) * (1.0 - x)
    }
}

fn wrap_unit(d: f64) -> f64 {
    d - d.round()
}

/// Periodic distance on the unit-area torus, minimized over nearby lattice images.
pub fn torus_distance(m: &TorusModulus, p: (f64, f64), q: (f64, f64)) -> f64 {
    let [gxx, gxy, gyy] = m.metric();
    let (dx0, dy0) = (wrap_unit(p.0 - q.0), wrap_unit(p.1 - q.1));
    let mut best = f64::INFINITY;
    for ky in -1..=1 {
        for kx in -2..=2 {
            let (dx, dy) = (dx0 + kx as f64, dy0 + ky as f64);
            best = best.min(gxx * dx * dx + 2.0 * gxy * dx * dy + gyy * dy * dy);
        }
    }
    best.sqrt()
}

/// `phi_r(x) = psi(dist(x, center)^2 / r^2)` on a torus grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffFunction {
    pub center: (f64, f64),
    pub radius: f64,
}

impl CutoffFunction {
    pub fn weights(&self, n: usize, m: &TorusModulus) -> Vec<f64> {
        let h = 1.0 / n as f64;
        let mut w = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let d = torus_distance(m, (i as f64 * h, j as f64 * h), self.center);
                w.push(psi(d * d / (self.radius * self.radius)));
            }
        }
        w
    }

    /// `sup |d phi|_g = sup |psi'(d^2/r^2)| 2 d / r^2`, sampled finely along a ray.
    pub fn gradient_sup(&self) -> f64 {
        let mut best: f64 = 0.0;
        for k in 0..=2000 {
            let d = self.radius * k as f64 / 2000.0;
            let t = d * d / (self.radius * self.radius);
            best = best.max(psi_prime(t).abs() * 2.0 * d / (self.radius * self.radius));
        }
        best
    }
}

/// `1/2 int phi^2 |du|^2_g dv_g`.
pub fn cutoff_energy(u: &SphereMapField, m: &TorusModulus, phi: &CutoffFunction) -> Result<f64> {
    let e = energy_density(u, m)?;
    let w = phi.weights(u.nx, m);
    let h2 = 1.0 / (u.nx * u.nx) as f64;
    Ok(h2 * e.iter().zip(&w).map(|(e, w)| e * w * w).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub t: f64,
    pub energy: f64,
    pub cutoff_energy: f64,
}

pub fn cutoff_energy_series(snapshots: &[FlowState], phi: &CutoffFunction) -> Result<Vec<EnergySample>> {
    snapshots
        .iter()
        .map(|s| {
            Ok(EnergySample {
                t: s.time,
                energy: crate::torusflow::energy(&s.u, &s.modulus)?,
                cutoff_energy: cutoff_energy(&s.u, &s.modulus, phi)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Least `C` making the local energy estimate hold for every sample pair;
    /// `None` when some pair moved the cut-off energy without any energy drop.
    pub constant: Option<f64>,
    pub pairs: usize,
    pub max_observed_drift: f64,
}

/// Fits `|E_phi(t) - E_phi(s)| <= (E(t) - E(s)) + C (delta^{-1/2} + |d phi|_inf)
/// (s - t)^{1/2} (E(t) - E(s))^{1/2}` over all pairs `t < s`.
pub fn cutoff_energy_drift(samples: &[EnergySample], delta: f64, dphi_sup: f64) -> Result<DriftReport> {
    if samples.len() < 2 {
        return Err(FlowError::invalid("cut-off energy drift needs at least 2 samples"));
    }
    if !(delta > 0.0) {
        return Err(FlowError::domain("delta must be > 0"));
    }
    let k = delta.powf(-0.5) + dphi_sup;
    let mut c: Option<f64> = Some(0.0);
    let (mut pairs, mut worst) = (0, 0.0f64);
    for (a, p) in samples.iter().enumerate() {
        for q in &samples[a + 1..] {
            pairs += 1;
            let drift = (q.cutoff_energy - p.cutoff_energy).abs();
            worst = worst.max(drift);
            let drop = (p.energy - q.energy).max(0.0);
            let excess = drift - drop;
            if excess <= 1e-14 * p.energy.abs().max(1.0) {
                continue;
            }
            let denom = k * (q.t - p.t).max(0.0).sqrt() * drop.sqrt();
            if denom > 0.0 {
                c = c.map(|c| c.max(excess / denom));
            } else {
                c = None;
            }
        }
    }
    Ok(DriftReport { constant: c, pairs, max_observed_drift: worst })
}

/// Grid offsets `(di, dj, dist)` of the closed `r`-ball around a node.
fn ball_offsets(n: usize, m: &TorusModulus, r: f64) -> Vec<(isize, isize, f64)> {
    let h = 1.0 / n as f64;
    let reach = ((r / (h * m.min_eigenvalue().sqrt())).ceil() as isize).min(n as isize / 2);
    let mut out = Vec::new();
    for dj in -reach..=reach {
        for di in -reach..=reach {
            let d = torus_distance(m, (di as f64 * h, dj as f64 * h), (0.0, 0.0));
            if d <= r {
                out.push((di, dj, d));
            }
        }
    }
    out
}

fn ball_energy(density: &[f64], n: usize, offsets: &[(isize, isize, f64)], i: usize, j: usize) -> f64 {
    let h2 = 1.0 / (n * n) as f64;
    let n = n as isize;
    let mut s = 0.0;
    for &(di, dj, _) in offsets {
        let ii = (i as isize + di).rem_euclid(n) as usize;
        let jj = (j as isize + dj).rem_euclid(n) as usize;
        s += density[jj * n as usize + ii];
    }
    s * h2
}

/// Energy in the closed `r`-ball around grid coordinates `center`.
pub fn local_energy(u: &SphereMapField, m: &TorusModulus, center: (f64, f64), r: f64) -> Result<f64> {
    let e = energy_density(u, m)?;
    let n = u.nx;
    let h = 1.0 / n as f64;
    let mut s = 0.0;
    for j in 0..n {
        for i in 0..n {
            if torus_distance(m, (i as f64 * h, j as f64 * h), center) <= r {
                s += e[j * n + i];
            }
        }
    }
    Ok(s * h * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub pass: bool,
    pub local_energy: f64,
    /// `int phi^2 (|nabla du|^2 + |du|^4)` when the gate passes.
    pub hessian_integral: Option<f64>,
    /// `|d phi|_inf^2 E_loc + int phi^2 |tau|^2`.
    pub rhs: Option<f64>,
    /// `hessian_integral / rhs`.
    pub fitted_constant: Option<f64>,
}

/// Small-energy regularity check on the `r`-ball around `center`.
pub fn eps_regularity_gate(
    u: &SphereMapField,
    m: &TorusModulus,
    center: (f64, f64),
    r: f64,
    eps0: f64,
) -> Result<GateReport> {
    let local = local_energy(u, m, center, r)?;
    if local > eps0 {
        return Ok(GateReport { pass: false, local_energy: local, hessian_integral: None, rhs: None, fitted_constant: None });
    }
    let n = u.nx;
    let h = 1.0 / n as f64;
    let phi = CutoffFunction { center, radius: r };
    let w = phi.weights(n, m);
    let [gxx, gxy, gyy] = m.inverse_metric();
    let dens = energy_density(u, m)?;
    let tau = tension_field(u, m)?;
    let c = u.comps;
    let (mut lhs, mut tau_term) = (0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            let wij = w[j * n + i];
            if wij == 0.0 {
                continue;
            }
            let (ip, im, jp, jm) = ((i + 1) % n, (i + n - 1) % n, (j + 1) % n, (j + n - 1) % n);
            let mut hess2 = 0.0;
            for k in 0..c {
                let u0 = u.at(i, j)[k];
                let uxx = (u.at(ip, j)[k] - 2.0 * u0 + u.at(im, j)[k]) / (h * h);
                let uyy = (u.at(i, jp)[k] - 2.0 * u0 + u.at(i, jm)[k]) / (h * h);
                let uxy = (u.at(ip, jp)[k] - u.at(ip, jm)[k] - u.at(im, jp)[k] + u.at(im, jm)[k]) / (4.0 * h * h);
                // |Hess|^2_g = g^ik g^jl u_ij u_kl
                hess2 += gxx * gxx * uxx * uxx
                    + gyy * gyy * uyy * uyy
                    + 2.0 * gxy * gxy * uxx * uyy
                    + 2.0 * (gxx * gyy + gxy * gxy) * uxy * uxy
                    + 4.0 * gxy * (gxx * uxx + gyy * uyy) * uxy;
            }
            let du2 = 2.0 * dens[j * n + i];
            lhs += wij * wij * (hess2 + du2 * du2);
            let t2: f64 = tau[(j * n + i) * c..(j * n + i + 1) * c].iter().map(|v| v * v).sum();
            tau_term += wij * wij * t2;
        }
    }
    let lhs = lhs * h * h;
    let rhs = phi.gradient_sup().powi(2) * local + tau_term * h * h;
    let fitted = if rhs > 0.0 { Some(lhs / rhs) } else if lhs == 0.0 { Some(0.0) } else { None };
    Ok(GateReport { pass: true, local_energy: local, hessian_integral: Some(lhs), rhs: Some(rhs), fitted_constant: fitted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPoint {
    /// Grid indices `(i, j)`.
    pub node: (usize, usize),
    /// Coordinates in `[0, 1)^2`.
    pub position: (f64, f64),
    /// Energy in each ladder ball at the last snapshot, largest radius first.
    pub ladder_energy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    pub eps0: f64,
    /// Decreasing radii.
    pub ladder: Vec<f64>,
    pub late_snapshots: usize,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self { eps0: DEFAULT_EPS0, ladder: DEFAULT_LADDER.to_vec(), late_snapshots: DEFAULT_LATE_SNAPSHOTS }
    }
}

/// Nodes whose ball energy stays `>= eps0` for every ladder radius at each of
/// the last `late_snapshots` snapshots, thinned so that selected points are at
/// least twice the smallest radius apart.
///
/// Ball energies are nested in the radius, so the test is decided by the
/// smallest radius; the full ladder is reported for the selected points.
pub fn detect_concentration_points(snapshots: &[FlowState], params: &DetectionParams) -> Result<Vec<ConcentrationPoint>> {
    if snapshots.is_empty() {
        return Err(FlowError::invalid("concentration detection needs snapshots"));
    }
    if params.ladder.is_empty() || params.ladder.iter().any(|r| !(*r > 0.0)) {
        return Err(FlowError::invalid("radius ladder must be nonempty and positive"));
    }
    let r_min = params.ladder.iter().cloned().fold(f64::INFINITY, f64::min);
    let late = &snapshots[snapshots.len().saturating_sub(params.late_snapshots.max(1))..];
    let n = late[0].u.nx;
    if late.iter().any(|s| s.u.nx != n) {
        return Err(FlowError::invalid("snapshots have different grids"));
    }
    let mut persistent = vec![f64::INFINITY; n * n];
    for s in late {
        let dens = energy_density(&s.u, &s.modulus)?;
        let offsets = ball_offsets(n, &s.modulus, r_min);
        for j in 0..n {
            for i in 0..n {
                let k = j * n + i;
                if persistent[k] >= params.eps0 {
                    persistent[k] = persistent[k].min(ball_energy(&dens, n, &offsets, i, j));
                }
            }
        }
    }
    let mut cand: Vec<(f64, usize)> =
        persistent.iter().enumerate().filter(|(_, e)| **e >= params.eps0).map(|(k, e)| (*e, k)).collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let last = late.last().unwrap();
    let h = 1.0 / n as f64;
    let mut chosen: Vec<ConcentrationPoint> = Vec::new();
    for (_, k) in cand {
        let (i, j) = (k % n, k / n);
        let p = (i as f64 * h, j as f64 * h);
        if chosen.iter().any(|c| torus_distance(&last.modulus, c.position, p) < 2.0 * r_min) {
            continue;
        }
        let ladder_energy = params
            .ladder
            .iter()
            .map(|&r| local_energy(&last.u, &last.modulus, p, r))
            .collect::<Result<Vec<_>>>()?;
        chosen.push(ConcentrationPoint { node: (i, j), position: p, ladder_energy });
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodTimeSequence {
    pub times: Vec<f64>,
    /// `(|tau| + |P Phi|)(T - t)^{1/2}` at the selected times.
    pub values: Vec<f64>,
    /// Trapezoid value of `int |tau|^2 dt` over the history.
    pub tension_integral: f64,
    pub initial_energy: f64,
    /// `tension_integral <= E(0)`, as the energy identity requires.
    pub integral_consistent: bool,
}

/// Selects the running-minimum records of `(|tau| + |P Phi|)(T - t)^{1/2}`
/// over samples with `t < T`.
pub fn select_good_times(history: &[HistorySample], big_t: f64) -> Result<GoodTimeSequence> {
    let first = history.first().ok_or_else(|| FlowError::invalid("empty history"))?;
    let (mut times, mut values) = (Vec::new(), Vec::new());
    let mut best = f64::INFINITY;
    for s in history.iter().filter(|s| s.t < big_t) {
        let v = (s.tension_l2 + s.projection_l2) * (big_t - s.t).sqrt();
        if v <= best {
            best = v;
            times.push(s.t);
            values.push(v);
        }
    }
    let mut integral = 0.0;
    for w in history.windows(2) {
        integral += 0.5 * (w[1].t - w[0].t) * (w[0].tension_l2.powi(2) + w[1].tension_l2.powi(2));
    }
    Ok(GoodTimeSequence {
        times,
        values,
        tension_integral: integral,
        initial_energy: first.energy,
        integral_consistent: integral <= first.energy * (1.0 + 1e-9),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionParams {
    /// Window side as a multiple of the scale.
    pub window_factor: f64,
    pub tension_threshold: f64,
    pub energy_floor: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self { window_factor: 16.0, tension_threshold: 4.0, energy_floor: DEFAULT_EPS0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleCandidate {
    pub center: (f64, f64),
    pub scale: f64,
    /// Window energy at the original grid spacing.
    pub window_energy: f64,
    /// Energy after rescaling the window to unit size.
    pub energy: f64,
    /// Flat tension of the rescaled map, `L |tau|_{L^2(window)}`.
    pub rescaled_tension: f64,
    /// Offset of the window's energy centroid from its centre, in units of `scale`.
    pub centroid_offset: f64,
    pub misaligned: bool,
    pub accepted: bool,
    pub reason: Option<String>,
    /// `scale <= cap (T - t)^{1/2}` when a singular time was supplied.
    pub scale_within_cap: Option<bool>,
    /// Rescaled map on the unit square, row-major.
    #[serde(skip)]
    pub rescaled: Option<SphereMapField>,
}

/// Rectangular patch cut from a grid map, optionally periodic in `x`.
struct Patch {
    field: SphereMapField,
    hx: f64,
    hy: f64,
    ginv: [f64; 3],
    periodic_x: bool,
}

impl Patch {
    fn x_neighbours(&self, i: usize) -> (Option<usize>, Option<usize>) {
        let nx = self.field.nx;
        if self.periodic_x {
            (Some((i + nx - 1) % nx), Some((i + 1) % nx))
        } else {
            (i.checked_sub(1), (i + 1 < nx).then_some(i + 1))
        }
    }

    /// Discrete energy counting only edges inside the patch; `scale` divides
    /// both spacings.
    fn energy(&self, scale: f64) -> f64 {
        let p = &self.field;
        let (hx, hy) = (self.hx / scale, self.hy / scale);
        let [gxx, gxy, gyy] = self.ginv;
        let mut e = 0.0;
        for j in 0..p.ny {
            for i in 0..p.nx {
                let (im, ip) = self.x_neighbours(i);
                if let Some(ip) = ip {
                    e += 0.5 * gxx * dist2(p.at(ip, j), p.at(i, j)) * hy / hx;
                }
                if j + 1 < p.ny {
                    e += 0.5 * gyy * dist2(p.at(i, j + 1), p.at(i, j)) * hx / hy;
                }
                if let (Some(im), Some(ip), true, true) = (im, ip, j > 0, j + 1 < p.ny) {
                    if gxy != 0.0 {
                        let mut c = 0.0;
                        for k in 0..p.comps {
                            c += (p.at(ip, j)[k] - p.at(im, j)[k]) * (p.at(i, j + 1)[k] - p.at(i, j - 1)[k]);
                        }
                        e += gxy * c / 4.0;
                    }
                }
            }
        }
        e
    }

    /// `L^2` norm of the discrete tension over interior nodes.
    fn tension(&self) -> f64 {
        let p = &self.field;
        let (hx, hy) = (self.hx, self.hy);
        let [gxx, gxy, gyy] = self.ginv;
        let c = p.comps;
        let mut total = 0.0;
        let mut t = vec![0.0; c];
        for j in 1..p.ny.saturating_sub(1) {
            for i in 0..p.nx {
                let (Some(im), Some(ip)) = self.x_neighbours(i) else { continue };
                let u0 = p.at(i, j);
                for k in 0..c {
                    let uxx = (p.at(ip, j)[k] - 2.0 * u0[k] + p.at(im, j)[k]) / (hx * hx);
                    let uyy = (p.at(i, j + 1)[k] - 2.0 * u0[k] + p.at(i, j - 1)[k]) / (hy * hy);
                    let uxy = (p.at(ip, j + 1)[k] - p.at(ip, j - 1)[k] - p.at(im, j + 1)[k] + p.at(im, j - 1)[k])
                        / (4.0 * hx * hy);
                    t[k] = gxx * uxx + gyy * uyy + 2.0 * gxy * uxy;
                }
                let s: f64 = t.iter().zip(u0).map(|(a, b)| a * b).sum();
                total += t.iter().zip(u0).map(|(a, b)| (a - s * b).powi(2)).sum::<f64>() * hx * hy;
            }
        }
        total.sqrt()
    }
}

fn finish_candidate(
    patch: Patch,
    side: f64,
    center: (f64, f64),
    scale: f64,
    centroid_offset: f64,
    params: &ExtractionParams,
) -> BubbleCandidate {
    let window_energy = patch.energy(1.0);
    let energy = patch.energy(side);
    let rescaled_tension = side * patch.tension();
    let misaligned = centroid_offset > MISALIGNED_OFFSET;
    let reason = if energy < params.energy_floor {
        Some(format!("energy {energy:.4} below floor {}", params.energy_floor))
    } else if rescaled_tension > params.tension_threshold {
        Some(format!("rescaled tension {rescaled_tension:.4} above {}", params.tension_threshold))
    } else {
        None
    };
    BubbleCandidate {
        center,
        scale,
        window_energy,
        energy,
        rescaled_tension,
        centroid_offset,
        misaligned,
        accepted: reason.is_none(),
        reason,
        scale_within_cap: None,
        rescaled: Some(patch.field),
    }
}

/// Cuts the square window of side `window_factor * scale` (grid coordinates)
/// around `center` out of a torus map and rescales it to unit size.
pub fn extract_bubble(
    u: &SphereMapField,
    m: &TorusModulus,
    center: (f64, f64),
    scale: f64,
    params: &ExtractionParams,
) -> Result<BubbleCandidate> {
    let n = u.nx;
    let h = 1.0 / n as f64;
    let side = params.window_factor * scale;
    if !(scale > 0.0) || side >= 1.0 {
        return Err(FlowError::invalid(format!("window of side {side} does not fit in the torus")));
    }
    let half = (0.5 * side / h).floor() as isize;
    let (ci, cj) = ((center.0 / h).round() as isize, (center.1 / h).round() as isize);
    let w = (2 * half + 1) as usize;
    let dens = energy_density(u, m)?;
    let mut data = Vec::with_capacity(w * w * u.comps);
    let (mut mx, mut my, mut mass) = (0.0, 0.0, 0.0);
    for dj in -half..=half {
        for di in -half..=half {
            let i = (ci + di).rem_euclid(n as isize) as usize;
            let j = (cj + dj).rem_euclid(n as isize) as usize;
            data.extend_from_slice(u.at(i, j));
            let e = dens[j * n + i];
            mx += e * di as f64 * h;
            my += e * dj as f64 * h;
            mass += e;
        }
    }
    let patch = SphereMapField::from_raw(w, w, u.comps, data)?;
    let offset = if mass > 0.0 {
        torus_distance(m, (mx / mass, my / mass), (0.0, 0.0)) / scale
    } else {
        0.0
    };
    let snapped = (ci as f64 * h, cj as f64 * h);
    let patch = Patch { field: patch, hx: h, hy: h, ginv: m.inverse_metric(), periodic_x: false };
    Ok(finish_candidate(patch, side, snapped, scale, offset, params))
}

impl BubbleCandidate {
    /// Records whether `scale <= scale_cap (T - t)^{1/2}` at extraction time `t`.
    pub fn flag_scale_cap(&mut self, scale_cap: f64, singular_time: f64, t: f64) {
        self.scale_within_cap = Some(self.scale <= scale_cap * (singular_time - t).max(0.0).sqrt());
    }
}

/// Radius at which the centred ball holds half the energy of the `r_max`-ball.
pub fn half_energy_radius(u: &SphereMapField, m: &TorusModulus, center: (f64, f64), r_max: f64) -> Result<f64> {
    let dens = energy_density(u, m)?;
    let n = u.nx;
    let h = 1.0 / n as f64;
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let d = torus_distance(m, (i as f64 * h, j as f64 * h), center);
            if d <= r_max {
                pts.push((d, dens[j * n + i]));
            }
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pts.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Err(FlowError::invalid("no energy around the candidate centre"));
    }
    let mut acc = 0.0;
    for (k, &(d, e)) in pts.iter().enumerate() {
        let prev = acc;
        acc += e;
        if acc >= 0.5 * total {
            let d0 = if k > 0 { pts[k - 1].0 } else { 0.0 };
            let frac = if e > 0.0 { (0.5 * total - prev) / e } else { 1.0 };
            return Ok(d0 + frac * (d - d0));
        }
    }
    Ok(r_max)
}

/// Max pairwise Euclidean distance between the nodal values on row `j` of a
/// cylinder field.
pub fn circle_oscillation(u: &SphereMapField, j: usize) -> Result<f64> {
    if j >= u.ny {
        return Err(FlowError::invalid(format!("row {j} outside the {} rows of the grid", u.ny)));
    }
    let mut best: f64 = 0.0;
    for a in 0..u.nx {
        for b in a + 1..u.nx {
            best = best.max(dist2(u.at(a, j), u.at(b, j)));
        }
    }
    Ok(best.sqrt())
}

pub fn oscillation_profile(u: &SphereMapField) -> Result<Vec<f64>> {
    (0..u.ny).map(|j| circle_oscillation(u, j)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    ConnectingCylinder,
    BubbleRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Row range `[first, last]`.
    pub rows: (usize, usize),
    pub s_range: (f64, f64),
    pub energy: f64,
    /// Max oscillation over the rows left after trimming `lambda_trim` rows at
    /// each end (the whole segment when it is shorter).
    pub trimmed_max_osc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleBranchReport {
    /// `s^0 = -X < s^1 < ... < s^m = X` with one interior split per bubble region.
    pub splits: Vec<f64>,
    pub segments: Vec<Segment>,
    /// `(s_j, osc_j)` for every row.
    pub oscillation: Vec<(f64, f64)>,
    pub candidates: Vec<BubbleCandidate>,
    pub total_energy: f64,
    /// `|sum of segment energies - total| / total`.
    pub ledger_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchParams {
    pub osc_threshold: f64,
    /// Rows trimmed at segment ends before checking connecting segments.
    pub lambda_trim: usize,
    pub extraction: ExtractionParams,
}

impl Default for BranchParams {
    fn default() -> Self {
        Self {
            osc_threshold: DEFAULT_OSC_THRESHOLD,
            lambda_trim: DEFAULT_LAMBDA_TRIM,
            extraction: ExtractionParams::default(),
        }
    }
}

/// Splits a cylinder map into near-curve connecting segments and bubble regions
/// by thresholding the circle oscillation, then extracts one candidate per
/// bubble region at the half-energy scale around its energy centroid.
pub fn segment_bubble_branch(u: &SphereMapField, grid: &CylinderGrid, params: &BranchParams) -> Result<BubbleBranchReport> {
    grid.check(u)?;
    let ns = grid.n_s;
    if ns < 2 * params.lambda_trim + 1 {
        return Err(FlowError::invalid("cylinder shorter than twice the trim length"));
    }
    let osc = oscillation_profile(u)?;
    let node_e = collarflow::node_energy(u, grid)?;
    let nt = grid.n_theta;
    let row_e: Vec<f64> = (0..ns).map(|j| node_e[j * nt..(j + 1) * nt].iter().sum()).collect();
    let total: f64 = row_e.iter().sum();

    // maximal runs of equal classification
    let mut runs: Vec<(SegmentKind, usize, usize)> = Vec::new();
    for j in 0..ns {
        let kind = if osc[j] <= params.osc_threshold { SegmentKind::ConnectingCylinder } else { SegmentKind::BubbleRegion };
        match runs.last_mut() {
            Some(r) if r.0 == kind => r.2 = j,
            _ => runs.push((kind, j, j)),
        }
    }
    // connecting runs too short to have a trimmed interior belong to the
    // neighbouring bubble regions
    let min_len = 2 * params.lambda_trim + 1;
    let mut merged: Vec<(SegmentKind, usize, usize)> = Vec::new();
    for (k, r) in runs.iter().enumerate() {
        let interior = k > 0 && k + 1 < runs.len();
        let kind = if r.0 == SegmentKind::ConnectingCylinder && interior && r.2 - r.1 + 1 < min_len {
            SegmentKind::BubbleRegion
        } else {
            r.0
        };
        match merged.last_mut() {
            Some(m) if m.0 == kind => m.2 = r.2,
            _ => merged.push((kind, r.1, r.2)),
        }
    }

    let mut segments = Vec::new();
    let mut splits = vec![-grid.half_length];
    let mut candidates = Vec::new();
    for &(kind, a, b) in &merged {
        let energy: f64 = row_e[a..=b].iter().sum();
        let (ta, tb) = if b - a + 1 > 2 * params.lambda_trim {
            (a + params.lambda_trim, b - params.lambda_trim)
        } else {
            (a, b)
        };
        let trimmed_max_osc = osc[ta..=tb].iter().cloned().fold(0.0, f64::max);
        segments.push(Segment { kind, rows: (a, b), s_range: (grid.s(a), grid.s(b)), energy, trimmed_max_osc });
        if kind == SegmentKind::BubbleRegion && energy > 0.0 {
            let centre = (a..=b).map(|j| row_e[j] * grid.s(j)).sum::<f64>() / energy;
            splits.push(centre);
            candidates.push(extract_cylinder_bubble(u, grid, &row_e, (a, b), centre, &params.extraction)?);
        }
    }
    splits.push(grid.half_length);
    let seg_sum: f64 = segments.iter().map(|s| s.energy).sum();
    let ledger_residual = if total > 0.0 { (seg_sum - total).abs() / total } else { 0.0 };
    Ok(BubbleBranchReport {
        splits,
        segments,
        oscillation: (0..ns).map(|j| (grid.s(j), osc[j])).collect(),
        candidates,
        total_energy: total,
        ledger_residual,
    })
}

/// Extraction on a cylinder: the window spans all of `theta` and
/// `window_factor * scale / 2` on each side of `centre` in `s`, where the scale
/// is the half-width around `centre` holding half of the region's energy.
fn extract_cylinder_bubble(
    u: &SphereMapField,
    grid: &CylinderGrid,
    row_e: &[f64],
    region: (usize, usize),
    centre: f64,
    params: &ExtractionParams,
) -> Result<BubbleCandidate> {
    let hs = grid.h_s();
    let ns = grid.n_s;
    let (ra, rb) = region;
    let jc = (((centre + grid.half_length) / hs).round() as usize).clamp(ra, rb);
    let region_energy: f64 = row_e[ra..=rb].iter().sum();
    let mut acc = row_e[jc];
    let mut scale = 0.5 * hs;
    let mut r = 0;
    while acc < 0.5 * region_energy {
        r += 1;
        let add = jc.checked_sub(r).filter(|j| *j >= ra).map_or(0.0, |j| row_e[j])
            + if jc + r <= rb { row_e[jc + r] } else { 0.0 };
        let frac = if add > 0.0 { ((0.5 * region_energy - acc) / add).min(1.0) } else { 1.0 };
        scale = (r as f64 - 0.5 + frac) * hs;
        acc += add;
    }
    let half_rows = (0.5 * params.window_factor * scale / hs).ceil() as usize;
    if jc < half_rows || jc + half_rows >= ns {
        let e: f64 = row_e[jc.saturating_sub(half_rows)..=(jc + half_rows).min(ns - 1)].iter().sum();
        return Ok(BubbleCandidate {
            center: (0.0, grid.s(jc)),
            scale,
            window_energy: e,
            energy: e,
            rescaled_tension: f64::NAN,
            centroid_offset: 0.0,
            misaligned: false,
            accepted: false,
            reason: Some("window clipped by the cylinder ends".into()),
            scale_within_cap: None,
            rescaled: None,
        });
    }
    let (a, b) = (jc - half_rows, jc + half_rows);
    let mut data = Vec::with_capacity((b - a + 1) * grid.n_theta * u.comps);
    for j in a..=b {
        for i in 0..grid.n_theta {
            data.extend_from_slice(u.at(i, j));
        }
    }
    let field = SphereMapField::from_raw(grid.n_theta, b - a + 1, u.comps, data)?;
    let mass: f64 = row_e[a..=b].iter().sum();
    let centroid = if mass > 0.0 { (a..=b).map(|j| row_e[j] * grid.s(j)).sum::<f64>() / mass } else { centre };
    let side = (b - a) as f64 * hs;
    let offset = (centroid - grid.s(jc)).abs() / scale;
    let patch = Patch { field, hx: grid.h_theta(), hy: hs, ginv: [1.0, 0.0, 1.0], periodic_x: true };
    Ok(finish_candidate(patch, side, (0.0, grid.s(jc)), scale, offset, params))
}

/// Energy accounting at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// `(delta, energy on the delta-thick part)` for each admissible ladder value.
    pub thick_by_delta: Vec<(f64, f64)>,
    pub delta_used: f64,
    pub e_thick: f64,
    /// `final_energy - e_thick`.
    pub e_thin: f64,
    /// Energy of the thin part summed directly.
    pub e_thin_direct: f64,
    /// `|e_thick + e_thin_direct - final_energy| / final_energy`.
    pub additivity_residual: f64,
    pub bubble_energies: Vec<f64>,
    /// `|e_thin - sum of bubble energies| / sum`, when there are bubbles.
    pub thin_vs_bubbles: Option<f64>,
    pub cross_checks: Vec<CrossCheck>,
}

/// Thin-part energy at a late sample for a time-dependent threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub label: String,
    pub t: f64,
    pub delta: f64,
    pub thin_energy: f64,
    pub discrepancy: f64,
}

/// Ledger for a torus run. The flat torus has constant injectivity radius, so
/// each `delta`-thin part is either empty or everything.
pub fn torus_ledger(
    history: &[HistorySample],
    final_state: &FlowState,
    bubbles: &[f64],
    ladder: &[f64],
) -> Result<EnergyLedger> {
    let first = history.first().ok_or_else(|| FlowError::invalid("ledger needs a history"))?;
    let e_final = crate::torusflow::energy(&final_state.u, &final_state.modulus)?;
    let inj = crate::torusflow::injectivity_radius(&final_state.modulus);
    let mut thick_by_delta = Vec::new();
    for &d in ladder {
        thick_by_delta.push((d, if inj < d { 0.0 } else { e_final }));
    }
    let (delta_used, e_thick) = thick_by_delta.last().cloned().ok_or_else(|| FlowError::invalid("empty ladder"))?;
    let thin_direct = if inj < delta_used { e_final } else { 0.0 };
    Ok(assemble(first.energy, e_final, thick_by_delta, delta_used, e_thick, thin_direct, bubbles, Vec::new()))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    e0: f64,
    e_final: f64,
    thick_by_delta: Vec<(f64, f64)>,
    delta_used: f64,
    e_thick: f64,
    thin_direct: f64,
    bubbles: &[f64],
    cross_checks: Vec<CrossCheck>,
) -> EnergyLedger {
    let e_thin = (e_final - e_thick).max(0.0);
    let additivity_residual = if e_final > 0.0 { (e_thick + thin_direct - e_final).abs() / e_final } else { (e_thick + thin_direct).abs() };
    let bsum: f64 = bubbles.iter().sum();
    EnergyLedger {
        initial_energy: e0,
        final_energy: e_final,
        thick_by_delta,
        delta_used,
        e_thick,
        e_thin,
        e_thin_direct: thin_direct,
        additivity_residual,
        bubble_energies: bubbles.to_vec(),
        thin_vs_bubbles: if bsum > 0.0 { Some((e_thin - bsum).abs() / bsum) } else { None },
        cross_checks,
    }
}

/// Ledger for a collar run. Thick parts are `{|s| > X(ell_final, delta)}` for
/// ladder values `delta >= 2 ell_final` (smaller thresholds are dominated by the
/// finite core length rather than the pinching); the smallest admissible value
/// defines `E_thick`. Cross-checks use the late snapshots with thresholds
/// `T - t` and `K (T - t)(E(t) - E_final)`.
pub fn collar_ledger(run: &CollarRun, singular_time: f64, bubbles: &[f64], ladder: &[f64], k: f64) -> Result<EnergyLedger> {
    collar_ledger_from(&run.history, &run.grid, &run.snapshots, &run.final_state, singular_time, bubbles, ladder, k)
}

/// [`collar_ledger`] on stored data.
#[allow(clippy::too_many_arguments)]
pub fn collar_ledger_from(
    history: &[HistorySample],
    grid: &CylinderGrid,
    snapshots: &[CollarFlowState],
    fin: &CollarFlowState,
    singular_time: f64,
    bubbles: &[f64],
    ladder: &[f64],
    k: f64,
) -> Result<EnergyLedger> {
    let first = history.first().ok_or_else(|| FlowError::invalid("ledger needs a history"))?;
    let node_e = collarflow::node_energy(&fin.u, grid)?;
    let e_final: f64 = node_e.iter().sum();
    let mut thick_by_delta = Vec::new();
    for &d in ladder {
        if d < 2.0 * fin.ell {
            continue;
        }
        let x = collar_half_length(fin.ell, d)?;
        thick_by_delta.push((d, collarflow::window_energy(&node_e, grid, |s| s.abs() > x)));
    }
    let (delta_used, e_thick) = match thick_by_delta.last() {
        Some(v) => *v,
        None => return Err(FlowError::invalid("no ladder value is admissible for the final core length")),
    };
    let x = collar_half_length(fin.ell, delta_used)?;
    let thin_direct = collarflow::window_energy(&node_e, grid, |s| s.abs() <= x);
    let mut checks = Vec::new();
    let late: Vec<_> = snapshots.iter().filter(|s| s.time < singular_time).collect();
    if let Some(s) = late.last() {
        let e_t = collarflow::flat_energy(&s.u, grid)?;
        let thin_e = |d: f64| -> Result<f64> {
            if d > 0.0 {
                collarflow::thin_part_energy(&s.u, grid, s.ell, d)
            } else {
                Ok(0.0)
            }
        };
        let e_thin_ref = (e_final - e_thick).max(0.0);
        let d1 = singular_time - s.time;
        let t1 = thin_e(d1)?;
        checks.push(CrossCheck { label: "T-t".into(), t: s.time, delta: d1, thin_energy: t1, discrepancy: (t1 - e_thin_ref).abs() });
        let d2 = k * (singular_time - s.time) * (e_t - e_final).max(0.0);
        let t2 = thin_e(d2)?;
        checks.push(CrossCheck { label: format!("K={k}"), t: s.time, delta: d2, thin_energy: t2, discrepancy: (t2 - e_thin_ref).abs() });
    }
    Ok(assemble(first.energy, e_final, thick_by_delta, delta_used, e_thick, thin_direct, bubbles, checks))
}

/// Glue radii for synthetic torus bubbles: the bubble is exact inside `inner`
/// and switched off beyond `outer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glue {
    pub inner: f64,
    pub outer: f64,
}

impl Default for Glue {
    fn default() -> Self {
        Self { inner: 0.25, outer: 0.45 }
    }
}

fn smooth_off(r: f64, glue: Glue) -> f64 {
    let t = ((r - glue.inner) / (glue.outer - glue.inner)).clamp(0.0, 1.0);
    1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Inverse stereographic image of `w = sum_k chi_k lambda_k / zeta_k` on a torus
/// grid, where `zeta_k` is the conformal offset from the `k`-th centre scaled
/// to `g`-length. Each term is a degree-one bubble of scale `lambda_k` glued to
/// the south pole.
pub fn synthetic_torus_bubbles(n: usize, m: &TorusModulus, bubbles: &[((f64, f64), f64)], glue: Glue) -> Result<SphereMapField> {
    let h = 1.0 / n as f64;
    let tau = m.tau();
    let sb = m.b.sqrt();
    SphereMapField::from_fn(n, n, 3, |i, j, o| {
        let mut w = Complex64::new(0.0, 0.0);
        let mut at_pole = false;
        for &((cx, cy), lam) in bubbles {
            let (dx, dy) = (wrap_unit(i as f64 * h - cx), wrap_unit(j as f64 * h - cy));
            let zeta = (Complex64::new(dx, 0.0) + tau * dy) / sb;
            let r = zeta.norm();
            if r == 0.0 {
                at_pole = true;
                continue;
            }
            w += smooth_off(r, glue) * lam / zeta;
        }
        if at_pole {
            o.copy_from_slice(&[0.0, 0.0, 1.0]);
        } else {
            o.copy_from_slice(&crate::sphere::inverse_stereographic(w));
        }
    })
}
