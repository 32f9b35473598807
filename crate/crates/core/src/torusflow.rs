//! Coupled map/metric flow on flat unit-area tori.
//!
//! The torus is `[0,1)^2` with the constant metric
//! `g = b^{-1} (dx^2 + 2a dx dy + (a^2 + b^2) dy^2) = |dz|^2 / b`, `z = x + tau y`,
//! `tau = a + ib`. The map `u` takes values in `S^n` and is discretized on an
//! `N x N` periodic grid (rows `y`, columns `x`, spacing `h = 1/N`).
//!
//! Discrete energy, with forward differences for the diagonal terms and
//! centred differences for the mixed term:
//!
//! ```text
//! E = h^2 sum 1/2 [ g^xx |D+x u|^2 + g^yy |D+y u|^2 + 2 g^xy D0x u . D0y u ]
//! ```
//!
//! The discrete Laplacian below is exactly `-h^-2 dE/du`, so the semi-discrete
//! flow dissipates this energy at the rate `|tau|^2 + (eta^2/32) |P Phi|^2`.
//!
//! Hopf differential convention: `hopf_differential` returns
//! `phi = <u_z, u_z>`; the quadratic differential entering the metric equation
//! is `Phi = 4 phi dz^2`, and `<dz^2, dz^2>_g = 4 b^2` for `g = |dz|^2 / b`.
//! With these, `dt g = (eta^2/4) Re(P Phi)` moves the modulus by
//! `da/dt = -eta^2 b^2 Im c`, `db/dt = -eta^2 b^2 Re c` where `c` is the mean of `phi`.

use std::f64::consts::PI;
use std::path::PathBuf;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::field::{dot, SphereMapField};
use crate::io::{HistorySample, Snapshot};

/// Point `tau = a + ib` in the upper half plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusModulus {
    pub a: f64,
    pub b: f64,
}

impl Default for TorusModulus {
    fn default() -> Self {
        Self { a: 0.0, b: 1.0 }
    }
}

impl TorusModulus {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let m = Self { a, b };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !self.b.is_finite() || self.b <= 0.0 {
            return Err(FlowError::domain(format!("modulus ({}, {}) needs finite a and b > 0", self.a, self.b)));
        }
        Ok(())
    }

    pub fn tau(&self) -> Complex64 {
        Complex64::new(self.a, self.b)
    }

    /// `(g_xx, g_xy, g_yy)`.
    pub fn metric(&self) -> [f64; 3] {
        let (a, b) = (self.a, self.b);
        [1.0 / b, a / b, (a * a + b * b) / b]
    }

    /// `(g^xx, g^xy, g^yy)`.
    pub fn inverse_metric(&self) -> [f64; 3] {
        let (a, b) = (self.a, self.b);
        [(a * a + b * b) / b, -a / b, 1.0 / b]
    }

    pub fn det(&self) -> f64 {
        let [gxx, gxy, gyy] = self.metric();
        gxx * gyy - gxy * gxy
    }

    /// Smallest eigenvalue of `g`; the stable explicit step scales with it.
    pub fn min_eigenvalue(&self) -> f64 {
        let [gxx, _, gyy] = self.metric();
        let tr = gxx + gyy;
        // det g = 1
        let disc = (tr * tr - 4.0).max(0.0).sqrt();
        2.0 / (tr + disc)
    }
}

/// Half the shortest closed geodesic of the unit-area torus: the lattice is
/// `Z + tau Z` and lengths are scaled by `b^{-1/2}`.
pub fn injectivity_radius(m: &TorusModulus) -> f64 {
    // Gauss reduction of the basis (1, tau)
    let mut u = Complex64::new(1.0, 0.0);
    let mut v = m.tau();
    if v.norm_sqr() < u.norm_sqr() {
        std::mem::swap(&mut u, &mut v);
    }
    for _ in 0..200 {
        let mu = (v * u.conj()).re / u.norm_sqr();
        v -= u * mu.round();
        if v.norm_sqr() >= u.norm_sqr() {
            break;
        }
        std::mem::swap(&mut u, &mut v);
    }
    0.5 * u.norm() / m.b.sqrt()
}

fn check_square(u: &SphereMapField) -> Result<usize> {
    if u.nx != u.ny || u.nx < 3 {
        return Err(FlowError::invalid(format!("torus grid must be square with N >= 3, got {}x{}", u.nx, u.ny)));
    }
    Ok(u.nx)
}

/// Per-node `(|D+x u|^2, |D+y u|^2, D0x u . D0y u)`.
fn node_terms(u: &SphereMapField) -> Vec<[f64; 3]> {
    let n = u.nx;
    let inv_h = n as f64;
    let mut out = vec![[0.0; 3]; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        for (i, cell) in row.iter_mut().enumerate() {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let (u0, ue, uw, un, us) = (u.at(i, j), u.at(ip, j), u.at(im, j), u.at(i, jp), u.at(i, jm));
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for k in 0..u.comps {
                let dxp = (ue[k] - u0[k]) * inv_h;
                let dyp = (un[k] - u0[k]) * inv_h;
                let dxc = 0.5 * (ue[k] - uw[k]) * inv_h;
                let dyc = 0.5 * (un[k] - us[k]) * inv_h;
                a += dxp * dxp;
                b += dyp * dyp;
                c += dxc * dyc;
            }
            *cell = [a, b, c];
        }
    });
    out
}

fn energy_from_terms(terms: &[[f64; 3]], ginv: [f64; 3], area_element: f64, h: f64) -> f64 {
    let [gxx, gxy, gyy] = ginv;
    let mut sum = 0.0;
    for &[a, b, c] in terms {
        sum += gxx * a + gyy * b + 2.0 * gxy * c;
    }
    0.5 * h * h * sum * area_element
}

/// Energy density `1/2 |du|^2_g` at every node; the energy is `h^2` times the sum.
pub fn energy_density(u: &SphereMapField, m: &TorusModulus) -> Result<Vec<f64>> {
    check_square(u)?;
    let [gxx, gxy, gyy] = m.inverse_metric();
    Ok(node_terms(u).iter().map(|&[a, b, c]| 0.5 * (gxx * a + gyy * b + 2.0 * gxy * c)).collect())
}

/// Dirichlet energy `1/2 int |du|^2_g dv_g`.
pub fn energy(u: &SphereMapField, m: &TorusModulus) -> Result<f64> {
    energy_for_metric(u, m.metric())
}

/// Energy for an arbitrary constant metric `(g_xx, g_xy, g_yy)` on the grid
/// coordinates; invariant under `g -> s g`.
pub fn energy_for_metric(u: &SphereMapField, g: [f64; 3]) -> Result<f64> {
    let n = check_square(u)?;
    let [gxx, gxy, gyy] = g;
    let det = gxx * gyy - gxy * gxy;
    if !(det > 0.0) || !(gxx > 0.0) {
        return Err(FlowError::domain("metric must be positive definite"));
    }
    let ginv = [gyy / det, -gxy / det, gxx / det];
    Ok(energy_from_terms(&node_terms(u), ginv, det.sqrt(), 1.0 / n as f64))
}

/// Discrete `Delta_g u`, the negative energy gradient per unit area.
pub fn laplacian(u: &SphereMapField, m: &TorusModulus) -> Result<Vec<f64>> {
    let n = check_square(u)?;
    let [gxx, gxy, gyy] = m.inverse_metric();
    let inv_h2 = (n * n) as f64;
    let c = u.comps;
    let mut out = vec![0.0; u.data.len()];
    out.par_chunks_mut(n * c).enumerate().for_each(|(j, row)| {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let u0 = u.at(i, j);
            let (ue, uw, un, us) = (u.at(ip, j), u.at(im, j), u.at(i, jp), u.at(i, jm));
            let (une, use_, unw, usw) = (u.at(ip, jp), u.at(ip, jm), u.at(im, jp), u.at(im, jm));
            for k in 0..c {
                let dxx = ue[k] - 2.0 * u0[k] + uw[k];
                let dyy = un[k] - 2.0 * u0[k] + us[k];
                let dxy = 0.25 * (une[k] - use_[k] - unw[k] + usw[k]);
                row[i * c + k] = (gxx * dxx + gyy * dyy + 2.0 * gxy * dxy) * inv_h2;
            }
        }
    });
    Ok(out)
}

/// Tension field `Delta_g u + |du|^2_g u`, realized as the tangential part of
/// the discrete Laplacian.
pub fn tension_field(u: &SphereMapField, m: &TorusModulus) -> Result<Vec<f64>> {
    let mut lap = laplacian(u, m)?;
    tangential_part(u, &mut lap);
    Ok(lap)
}

pub(crate) fn tangential_part(u: &SphereMapField, v: &mut [f64]) {
    let c = u.comps;
    v.par_chunks_mut(c).zip(u.data.par_chunks(c)).for_each(|(t, p)| {
        let s = dot(t, p);
        for k in 0..c {
            t[k] -= s * p[k];
        }
    });
}

/// `phi = <u_z, u_z>` at every node, with `u_z = (u_y - conj(tau) u_x) / (2ib)`.
pub fn hopf_differential(u: &SphereMapField, m: &TorusModulus) -> Result<Vec<Complex64>> {
    check_square(u)?;
    Ok(node_terms(u).iter().map(|&t| hopf_from_terms(t, m)).collect())
}

fn hopf_from_terms([a, b, c]: [f64; 3], m: &TorusModulus) -> Complex64 {
    let tb = m.tau().conj();
    -(Complex64::new(b, 0.0) - 2.0 * tb * c + tb * tb * a) / (4.0 * m.b * m.b)
}

/// L^2(g)-projection onto `C dz^2`: the mean of `phi` (the area form and
/// `|dz^2|_g` are constant).
pub fn project_holomorphic(phi: &[Complex64]) -> Complex64 {
    if phi.is_empty() {
        return Complex64::new(0.0, 0.0);
    }
    let mut s = Complex64::new(0.0, 0.0);
    for p in phi {
        s += p;
    }
    s / phi.len() as f64
}

/// `|| P Phi ||_{L^2}` for `P Phi = 4 c dz^2` on the unit-area torus.
pub fn projection_norm(c: Complex64, m: &TorusModulus) -> f64 {
    8.0 * m.b * c.norm()
}

/// `(da/dt, db/dt)` induced by `dt g = (eta^2/4) Re(4 c dz^2)`.
pub fn modulus_velocity(c: Complex64, m: &TorusModulus, eta: f64) -> (f64, f64) {
    let k = eta * eta * m.b * m.b;
    (-k * c.im, -k * c.re)
}

/// `dt g = eta^2 Re(c dz^2)` as `(xx, xy, yy)` components.
pub fn metric_velocity(c: Complex64, m: &TorusModulus, eta: f64) -> [f64; 3] {
    let t = m.tau();
    let e2 = eta * eta;
    [e2 * c.re, e2 * (c * t).re, e2 * (c * t * t).re]
}

/// `|| dt g ||_{L^2}` for the horizontal velocity `eta^2 Re(c dz^2)`.
pub fn horizontal_speed(c: Complex64, m: &TorusModulus, eta: f64) -> f64 {
    eta * eta * 2f64.sqrt() * m.b * c.norm()
}

fn tensor_norm2(ginv: [f64; 3], s: [Complex64; 3]) -> f64 {
    // tr(g^-1 S g^-1 conj(S)) for symmetric S
    let gi = [[ginv[0], ginv[1]], [ginv[1], ginv[2]]];
    let sm = [[s[0], s[1]], [s[1], s[2]]];
    let mut total = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    total += gi[i][k] * gi[j][l] * (sm[i][j] * sm[k][l].conj()).re;
                }
            }
        }
    }
    total
}

/// `(|| 4 c dz^2 ||^2, || Re(4 c dz^2) ||^2)` computed from the tensors
/// directly, independent of the closed form used in [`projection_norm`].
pub fn quadratic_differential_norms(c: Complex64, m: &TorusModulus) -> (f64, f64) {
    let t = m.tau();
    let s = [4.0 * c, 4.0 * c * t, 4.0 * c * t * t];
    let r = s.map(|v| Complex64::new(v.re, 0.0));
    let ginv = m.inverse_metric();
    (tensor_norm2(ginv, s), tensor_norm2(ginv, r))
}

/// Everything the history records about one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub energy: f64,
    pub tension_l2: f64,
    pub hopf_mean_re: f64,
    pub hopf_mean_im: f64,
    pub projection_l2: f64,
    pub speed_l2: f64,
    pub inj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub time: f64,
    pub u: SphereMapField,
    pub modulus: TorusModulus,
}

struct Evaluation {
    tension: Vec<f64>,
    c: Complex64,
    energy: f64,
}

/// Tension and the grid sums of `(A, B, C)` from [`node_terms`] in one pass.
/// Row sums are combined in row order so the result does not depend on the
/// thread count.
fn evaluate(u: &SphereMapField, m: &TorusModulus) -> Result<Evaluation> {
    let n = check_square(u)?;
    let ginv = m.inverse_metric();
    let [gxx, gxy, gyy] = ginv;
    let inv_h = n as f64;
    let inv_h2 = inv_h * inv_h;
    let c = u.comps;
    let d = &u.data;
    let mut tension = vec![0.0; d.len()];
    let mut row_sums = vec![[0.0f64; 3]; n];
    tension.par_chunks_mut(n * c).zip(row_sums.par_iter_mut()).enumerate().for_each(|(j, (row, sums))| {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        let mut acc = [0.0; 3];
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let o = |ii: usize, jj: usize| (jj * n + ii) * c;
            let (p0, pe, pw, pn, ps) = (o(i, j), o(ip, j), o(im, j), o(i, jp), o(i, jm));
            let (pne, pse, pnw, psw) = (o(ip, jp), o(ip, jm), o(im, jp), o(im, jm));
            let t = &mut row[i * c..(i + 1) * c];
            let (mut a, mut b, mut cc, mut s) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..c {
                let u0 = d[p0 + k];
                let (ue, uw, un, us) = (d[pe + k], d[pw + k], d[pn + k], d[ps + k]);
                let dxp = (ue - u0) * inv_h;
                let dyp = (un - u0) * inv_h;
                let dxc = 0.5 * (ue - uw) * inv_h;
                let dyc = 0.5 * (un - us) * inv_h;
                a += dxp * dxp;
                b += dyp * dyp;
                cc += dxc * dyc;
                let dxy = 0.25 * (d[pne + k] - d[pse + k] - d[pnw + k] + d[psw + k]);
                let lap = (gxx * (ue - 2.0 * u0 + uw) + gyy * (un - 2.0 * u0 + us) + 2.0 * gxy * dxy) * inv_h2;
                t[k] = lap;
                s += lap * u0;
            }
            for k in 0..c {
                t[k] -= s * d[p0 + k];
            }
            acc[0] += a;
            acc[1] += b;
            acc[2] += cc;
        }
        *sums = acc;
    });
    let mut total = [0.0; 3];
    for r in &row_sums {
        for k in 0..3 {
            total[k] += r[k];
        }
    }
    let nodes = (n * n) as f64;
    let mean = total.map(|v| v / nodes);
    let energy = 0.5 * (gxx * mean[0] + gyy * mean[1] + 2.0 * gxy * mean[2]);
    let c = hopf_from_terms(mean, m);
    Ok(Evaluation { tension, c, energy })
}

impl FlowState {
    pub fn new(time: f64, u: SphereMapField, modulus: TorusModulus) -> Result<Self> {
        check_square(&u)?;
        modulus.validate()?;
        Ok(Self { time, u, modulus })
    }

    pub fn grid_size(&self) -> usize {
        self.u.nx
    }

    pub fn diagnostics(&self, eta: f64) -> Result<Diagnostics> {
        let ev = evaluate(&self.u, &self.modulus)?;
        let h2 = 1.0 / (self.u.nodes() as f64);
        let tension_l2 = (h2 * ev.tension.iter().map(|v| v * v).sum::<f64>()).sqrt();
        Ok(Diagnostics {
            energy: ev.energy,
            tension_l2,
            hopf_mean_re: ev.c.re,
            hopf_mean_im: ev.c.im,
            projection_l2: projection_norm(ev.c, &self.modulus),
            speed_l2: horizontal_speed(ev.c, &self.modulus, eta),
            inj: injectivity_radius(&self.modulus),
        })
    }

    pub fn history_sample(&self, eta: f64) -> Result<HistorySample> {
        let d = self.diagnostics(eta)?;
        Ok(HistorySample {
            t: self.time,
            energy: d.energy,
            tension_l2: d.tension_l2,
            projection_l2: d.projection_l2,
            a: self.modulus.a,
            b: self.modulus.b,
            inj: d.inj,
            speed_l2: d.speed_l2,
        })
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { cylinder: false, a: self.modulus.a, b: self.modulus.b, time: self.time, field: self.u.clone() }
    }

    pub fn from_snapshot(s: Snapshot) -> Result<Self> {
        if s.cylinder {
            return Err(FlowError::Format("snapshot is a cylinder snapshot, not a torus one".into()));
        }
        Self::new(s.time, s.field, TorusModulus { a: s.a, b: s.b })
    }
}

/// Largest admissible step: `cfl_factor h^2 lambda_min(g)`.
pub fn cfl_limit(n: usize, m: &TorusModulus, cfl_factor: f64) -> f64 {
    let h = 1.0 / n as f64;
    cfl_factor * h * h * m.min_eigenvalue()
}

fn advance(u: &SphereMapField, m: &TorusModulus, ev: &Evaluation, dt: f64, eta: f64) -> (SphereMapField, TorusModulus) {
    let mut next = u.clone();
    for (x, t) in next.data.iter_mut().zip(&ev.tension) {
        *x += dt * t;
    }
    next.renormalize();
    let (da, db) = modulus_velocity(ev.c, m, eta);
    (next, TorusModulus { a: m.a + dt * da, b: m.b + dt * db })
}

/// One explicit midpoint step of the coupled flow, followed by nodewise
/// renormalization. `cfl_factor` bounds `dt` against the current metric.
pub fn step(state: &FlowState, dt: f64, eta: f64, cfl_factor: f64) -> Result<FlowState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(FlowError::invalid(format!("time step must be positive, got {dt}")));
    }
    let limit = cfl_limit(state.grid_size(), &state.modulus, cfl_factor);
    if dt > limit {
        return Err(FlowError::Cfl { dt, limit });
    }
    let abort = |reason: &str| FlowError::NumericalAbort {
        time: state.time,
        reason: reason.to_owned(),
        snapshot: Some(state.snapshot().encode()),
    };
    let ev0 = evaluate(&state.u, &state.modulus)?;
    let (u_mid, m_mid) = advance(&state.u, &state.modulus, &ev0, 0.5 * dt, eta);
    if !(m_mid.b > 0.0) {
        return Err(abort("modulus left the upper half plane"));
    }
    let ev1 = evaluate(&u_mid, &m_mid)?;
    let mut next = state.u.clone();
    for (x, t) in next.data.iter_mut().zip(&ev1.tension) {
        *x += dt * t;
    }
    next.renormalize();
    let (da, db) = modulus_velocity(ev1.c, &m_mid, eta);
    let modulus = TorusModulus { a: state.modulus.a + dt * da, b: state.modulus.b + dt * db };
    if !next.is_finite() || !modulus.a.is_finite() || !modulus.b.is_finite() {
        return Err(abort("non-finite value after step"));
    }
    if !(modulus.b > 0.0) {
        return Err(abort("modulus left the upper half plane"));
    }
    Ok(FlowState { time: state.time + dt, u: next, modulus })
}

/// Initial map selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum TorusInitial {
    /// Every node at the last basis vector.
    Constant,
    /// `u = (cos 2 pi x, sin 2 pi x, 0, ...)`.
    Wrap,
    /// The wrap with a smooth out-of-plane bump of size `epsilon` plus optional
    /// seeded uniform noise of amplitude `noise`.
    WrapPerturbed {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Nodal values read from a snapshot file.
    CustomGridFile { path: PathBuf },
}

fn default_epsilon() -> f64 {
    0.1
}

impl TorusInitial {
    pub fn build(&self, n: usize, target_dim: usize) -> Result<SphereMapField> {
        let comps = target_dim + 1;
        let h = 1.0 / n as f64;
        match self {
            TorusInitial::Constant => {
                let mut v = vec![0.0; comps];
                v[comps - 1] = 1.0;
                SphereMapField::constant(n, n, comps, &v)
            }
            TorusInitial::Wrap => SphereMapField::from_fn(n, n, comps, |i, _, o| {
                let x = 2.0 * PI * i as f64 * h;
                o[0] = x.cos();
                o[1] = x.sin();
            }),
            TorusInitial::WrapPerturbed { epsilon, noise, seed } => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                SphereMapField::from_fn(n, n, comps, |i, j, o| {
                    let (x, y) = (2.0 * PI * i as f64 * h, 2.0 * PI * j as f64 * h);
                    let angle = x + epsilon * y.sin();
                    o[0] = angle.cos();
                    o[1] = angle.sin();
                    if comps > 2 {
                        o[2] = epsilon * (y.sin() + 0.5 * (x + y).cos());
                    }
                    if *noise > 0.0 {
                        for v in o.iter_mut() {
                            *v += noise * rng.gen_range(-1.0..1.0);
                        }
                    }
                })
            }
            TorusInitial::CustomGridFile { path } => {
                let snap = Snapshot::read(path)?;
                let f = snap.field;
                if f.nx != n || f.ny != n || f.comps != comps {
                    return Err(FlowError::invalid(format!(
                        "grid file {} holds {}x{} nodes in S^{}, config asks for {n}x{n} in S^{target_dim}",
                        path.display(),
                        f.nx,
                        f.ny,
                        f.comps - 1
                    )));
                }
                let mut f = f;
                f.renormalize();
                Ok(f)
            }
        }
    }
}

/// Numerical parameters of a torus run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub eta: f64,
    /// Fixed time step; defaults to half the CFL limit of the initial metric.
    pub dt: Option<f64>,
    #[serde(rename = "N")]
    pub n: usize,
    pub target_dim: usize,
    pub cfl_factor: f64,
    pub max_time: f64,
    pub inj_floor: f64,
    pub modulus: TorusModulus,
    /// Record a history sample every this many steps.
    pub sample_every: usize,
    /// Keep a snapshot every this many steps; 0 keeps only the final state.
    pub snapshot_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            dt: None,
            n: 64,
            target_dim: 2,
            cfl_factor: 0.2,
            max_time: 0.05,
            inj_floor: 1e-3,
            modulus: TorusModulus::default(),
            sample_every: 10,
            snapshot_every: 0,
        }
    }
}

impl FlowConfig {
    /// Every violated precondition, empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            v.push(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if self.n < 8 {
            v.push(format!("N must be >= 8, got {}", self.n));
        }
        if self.target_dim < 1 {
            v.push("target_dim must be >= 1".into());
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 0.25) {
            v.push(format!("cfl_factor must lie in (0, 0.25], got {}", self.cfl_factor));
        }
        if !(self.max_time > 0.0) || !self.max_time.is_finite() {
            v.push(format!("max_time must be finite and > 0, got {}", self.max_time));
        }
        if !(self.inj_floor > 0.0) {
            v.push(format!("inj_floor must be > 0, got {}", self.inj_floor));
        }
        if let Err(e) = self.modulus.validate() {
            v.push(e.to_string());
        }
        if self.sample_every == 0 {
            v.push("sample_every must be >= 1".into());
        }
        if let (Some(dt), true) = (self.dt, self.n >= 8 && self.modulus.b > 0.0) {
            let limit = cfl_limit(self.n, &self.modulus, self.cfl_factor);
            if !(dt > 0.0) {
                v.push(format!("dt must be > 0, got {dt}"));
            } else if dt > limit {
                v.push(format!("dt = {dt} exceeds the CFL limit {limit} of the initial metric"));
            }
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

    pub fn time_step(&self) -> f64 {
        self.dt.unwrap_or_else(|| 0.5 * cfl_limit(self.n, &self.modulus, self.cfl_factor))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Timeout,
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct TorusRun {
    pub history: Vec<HistorySample>,
    pub snapshots: Vec<FlowState>,
    pub final_state: FlowState,
    pub status: StopReason,
    pub dt: f64,
}

/// Integrates from `initial` until `max_time` or until the injectivity radius
/// drops below `inj_floor`. Samples are taken every `sample_every` steps and
/// at the final state.
pub fn run(cfg: &FlowConfig, initial: FlowState) -> Result<TorusRun> {
    cfg.validate()?;
    if initial.grid_size() != cfg.n || initial.u.target_dim() != cfg.target_dim {
        return Err(FlowError::invalid("initial state does not match the configured grid"));
    }
    let dt = cfg.time_step();
    let t0 = initial.time;
    let mut state = initial;
    let mut history = vec![state.history_sample(cfg.eta)?];
    let mut snapshots = Vec::new();
    let mut k: u64 = 0;
    let status = loop {
        if injectivity_radius(&state.modulus) < cfg.inj_floor {
            break StopReason::Degenerate;
        }
        if state.time >= t0 + cfg.max_time * (1.0 - 1e-12) {
            break StopReason::Timeout;
        }
        let mut next = step(&state, dt, cfg.eta, cfg.cfl_factor)?;
        k += 1;
        next.time = t0 + k as f64 * dt;
        state = next;
        if k.is_multiple_of(cfg.sample_every as u64) {
            history.push(state.history_sample(cfg.eta)?);
        }
        if cfg.snapshot_every > 0 && k.is_multiple_of(cfg.snapshot_every as u64) {
            snapshots.push(state.clone());
        }
    };
    if !k.is_multiple_of(cfg.sample_every as u64) {
        history.push(state.history_sample(cfg.eta)?);
    }
    if snapshots.last().map(|s| s.time) != Some(state.time) {
        snapshots.push(state.clone());
    }
    Ok(TorusRun { history, snapshots, final_state: state, status, dt })
}

/// Result of comparing `dE/dt` against the dissipation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityResidual {
    pub max_relative: f64,
    /// `(t, relative residual)` at each interior sample with uniform neighbours.
    pub samples: Vec<(f64, f64)>,
}

/// Max over interior samples of
/// `|dE/dt + |tau|^2 + (eta^2/32)|P Phi|^2| / (|dE/dt| + floor)`,
/// with `dE/dt` from centred differences. Triples with unequal spacing (such
/// as a truncated final sample) are skipped.
pub fn energy_identity_residual(history: &[HistorySample], eta: f64, floor: f64) -> Result<IdentityResidual> {
    if history.len() < 3 {
        return Err(FlowError::invalid(format!("energy identity needs >= 3 samples, got {}", history.len())));
    }
    let mut samples = Vec::new();
    let mut worst: f64 = 0.0;
    for w in history.windows(3) {
        let (h1, h2) = (w[1].t - w[0].t, w[2].t - w[1].t);
        if !(h1 > 0.0) || (h1 - h2).abs() > 1e-6 * h1 {
            continue;
        }
        let dedt = (w[2].energy - w[0].energy) / (w[2].t - w[0].t);
        let rate = w[1].tension_l2.powi(2) + eta * eta / 32.0 * w[1].projection_l2.powi(2);
        let rel = (dedt + rate).abs() / (dedt.abs() + floor);
        worst = worst.max(rel);
        samples.push((w[1].t, rel));
    }
    if samples.is_empty() {
        return Err(FlowError::invalid("history has no uniformly spaced sample triples"));
    }
    Ok(IdentityResidual { max_relative: worst, samples })
}

/// Relative slack allowed in `L^2 <= eta^2 (T - t)(E(t) - E(T))`. The bound is
/// sharp as `t -> T` along a constant-speed horizontal path, where the
/// quadrature of `L` and the recorded energies agree only to rounding.
pub const LENGTH_BOUND_REL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizontalReport {
    /// `L(t_k) = int_{t_k}^T |dt g| dt` at every sample.
    pub lengths: Vec<f64>,
    /// `eta^2 (T - t_k)(E(t_k) - E(T))`.
    pub bound: Vec<f64>,
    /// `|E(t_k) - E(T) - int_{t_k}^T (|tau|^2 + (eta^2/32)|P Phi|^2)|`, the
    /// discrete energy-identity defect over `[t_k, T]` (trapezoidal quadrature).
    pub energy_defect: Vec<f64>,
    pub bound_holds: bool,
    /// Samples where `L^2` exceeds the bound widened by
    /// `eta^2 (T - t_k) energy_defect_k`.
    pub violations: usize,
    /// Samples where `L^2` exceeds the bound with no defect allowance.
    pub strict_violations: usize,
    /// Largest `L^2 / bound` over samples with positive bound.
    pub worst_ratio: f64,
    /// Least `K0` with `|d inj^{1/2}| <= K0 dL` between consecutive samples;
    /// `None` when the metric never moved.
    pub inj_lipschitz_k0: Option<f64>,
}

/// Horizontal-curve diagnostics, with `T` and `E(T)` taken from the last sample.
///
/// The length bound is Cauchy-Schwarz applied to the energy identity, so along
/// a purely horizontal path of nearly constant speed it is sharp and the
/// discrete identity defect decides the sign. The bound is therefore checked
/// up to that measured defect; `strict_violations` counts the raw check.
pub fn horizontal_diagnostics(history: &[HistorySample], eta: f64) -> Result<HorizontalReport> {
    let last = history.last().ok_or_else(|| FlowError::invalid("empty history"))?;
    let n = history.len();
    let mut lengths = vec![0.0; n];
    for k in (0..n - 1).rev() {
        let dt = history[k + 1].t - history[k].t;
        lengths[k] = lengths[k + 1] + 0.5 * dt * (history[k].speed_l2 + history[k + 1].speed_l2);
    }
    let rate = |s: &HistorySample| s.tension_l2.powi(2) + eta * eta / 32.0 * s.projection_l2.powi(2);
    let mut dissipated = vec![0.0; n];
    for k in (0..n - 1).rev() {
        let dt = history[k + 1].t - history[k].t;
        dissipated[k] = dissipated[k + 1] + 0.5 * dt * (rate(&history[k]) + rate(&history[k + 1]));
    }
    let mut bound = Vec::with_capacity(n);
    let mut energy_defect = Vec::with_capacity(n);
    let (mut violations, mut strict_violations) = (0, 0);
    let mut worst_ratio: f64 = 0.0;
    for ((s, l), d) in history.iter().zip(&lengths).zip(&dissipated) {
        let rhs = eta * eta * (last.t - s.t) * (s.energy - last.energy);
        let defect = (s.energy - last.energy - d).abs();
        let lhs = l * l;
        let widen = |extra: f64| (rhs.max(0.0) + extra) * (1.0 + LENGTH_BOUND_REL_SLACK) + f64::MIN_POSITIVE;
        if lhs > widen(0.0) {
            strict_violations += 1;
        }
        if lhs > widen(eta * eta * (last.t - s.t) * defect) {
            violations += 1;
        }
        energy_defect.push(defect);
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
        bound.push(rhs);
    }
    let mut k0: Option<f64> = None;
    for k in 0..n - 1 {
        let dl = lengths[k] - lengths[k + 1];
        let dj = (history[k + 1].inj.sqrt() - history[k].inj.sqrt()).abs();
        if dl > 0.0 {
            let r = dj / dl;
            k0 = Some(k0.map_or(r, |v| v.max(r)));
        }
    }
    Ok(HorizontalReport {
        lengths,
        bound,
        energy_defect,
        bound_holds: violations == 0,
        violations,
        strict_violations,
        worst_ratio,
        inj_lipschitz_k0: k0,
    })
}
