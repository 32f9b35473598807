//! Browser bindings. Each function returns a flat `[x0, y0, x1, y1, ...]`
//! array so the page can plot it without a serialization layer.

use tmflow_core::error::Result;
use tmflow_core::hypgeom::{collar_conformal_factor, collar_half_length};
use tmflow_core::ricci::{run_ricci, CuspedParams, RicciConfig};
use tmflow_core::torusflow::{self, FlowConfig, FlowState, TorusInitial, TorusModulus};
use wasm_bindgen::prelude::*;

fn js(r: Result<Vec<f64>>) -> std::result::Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Conformal factor `rho(s)` across the `delta`-collar of a geodesic of length `ell`.
pub fn collar_profile_points(ell: f64, delta: f64, samples: usize) -> Result<Vec<f64>> {
    let x = collar_half_length(ell, delta)?;
    let n = samples.max(2);
    let mut out = Vec::with_capacity(2 * n);
    for k in 0..n {
        let s = -x + 2.0 * x * k as f64 / (n - 1) as f64;
        out.push(s);
        out.push(collar_conformal_factor(ell, s)?);
    }
    Ok(out)
}

/// Energy against time for the perturbed wrap on an `n x n` torus grid.
pub fn torus_energy_points(n: usize, epsilon: f64, max_time: f64, a: f64, b: f64) -> Result<Vec<f64>> {
    let cfg = FlowConfig { n, max_time, modulus: TorusModulus { a, b }, ..FlowConfig::default() };
    let u = TorusInitial::WrapPerturbed { epsilon, noise: 0.0, seed: 0 }.build(n, cfg.target_dim)?;
    let run = torusflow::run(&cfg, FlowState::new(0.0, u, cfg.modulus)?)?;
    Ok(run.history.iter().flat_map(|h| [h.t, h.energy]).collect())
}

/// Area against time for Ricci flow from the capped cusped metric with `punctures` cusps.
pub fn ricci_area_points(punctures: usize, cap: f64) -> Result<Vec<f64>> {
    let cfg = RicciConfig {
        n_phi: 32,
        n_theta: 17,
        initial: CuspedParams { punctures, cap, ..CuspedParams::default() },
        ..RicciConfig::default()
    };
    let run = run_ricci(&cfg)?;
    Ok(run.samples.iter().flat_map(|s| [s.t, s.area]).collect())
}

#[wasm_bindgen]
pub fn collar_profile(ell: f64, delta: f64, samples: usize) -> std::result::Result<Vec<f64>, JsError> {
    js(collar_profile_points(ell, delta, samples))
}

#[wasm_bindgen]
pub fn torus_energy(n: usize, epsilon: f64, max_time: f64, a: f64, b: f64) -> std::result::Result<Vec<f64>, JsError> {
    js(torus_energy_points(n, epsilon, max_time, a, b))
}

#[wasm_bindgen]
pub fn ricci_area(punctures: usize, cap: f64) -> std::result::Result<Vec<f64>, JsError> {
    js(ricci_area_points(punctures, cap))
}
