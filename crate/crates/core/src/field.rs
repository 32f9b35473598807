use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

/// Nodal values of a map into the unit sphere `S^n`, stored row-major with
/// `comps = n + 1` components per node. Row index `j` runs over `ny`, column
/// index `i` over `nx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereMapField {
    pub nx: usize,
    pub ny: usize,
    pub comps: usize,
    pub data: Vec<f64>,
}

impl SphereMapField {
    /// Every node set to `value`, normalized.
    pub fn constant(nx: usize, ny: usize, comps: usize, value: &[f64]) -> Result<Self> {
        if value.len() != comps {
            return Err(FlowError::invalid("constant value has wrong dimension"));
        }
        let mut data = Vec::with_capacity(nx * ny * comps);
        for _ in 0..nx * ny {
            data.extend_from_slice(value);
        }
        let mut f = Self { nx, ny, comps, data };
        f.check_shape()?;
        f.renormalize();
        Ok(f)
    }

    /// Builds a field from `f(i, j, out)`; the result is renormalized.
    pub fn from_fn(nx: usize, ny: usize, comps: usize, mut f: impl FnMut(usize, usize, &mut [f64])) -> Result<Self> {
        let mut data = vec![0.0; nx * ny * comps];
        for j in 0..ny {
            for i in 0..nx {
                let k = (j * nx + i) * comps;
                f(i, j, &mut data[k..k + comps]);
            }
        }
        let mut field = Self { nx, ny, comps, data };
        field.check_shape()?;
        if field.data.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::invalid("non-finite nodal value"));
        }
        field.renormalize();
        Ok(field)
    }

    pub fn from_raw(nx: usize, ny: usize, comps: usize, data: Vec<f64>) -> Result<Self> {
        let f = Self { nx, ny, comps, data };
        f.check_shape()?;
        Ok(f)
    }

    fn check_shape(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.comps < 2 {
            return Err(FlowError::invalid(format!(
                "field shape {}x{} with {} components is empty or has target dimension < 1",
                self.nx, self.ny, self.comps
            )));
        }
        if self.data.len() != self.nx * self.ny * self.comps {
            return Err(FlowError::invalid("field data length does not match its shape"));
        }
        Ok(())
    }

    pub fn target_dim(&self) -> usize {
        self.comps - 1
    }

    pub fn nodes(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let k = (j * self.nx + i) * self.comps;
        &self.data[k..k + self.comps]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = (j * self.nx + i) * self.comps;
        &mut self.data[k..k + self.comps]
    }

    /// Largest `| |u| - 1 |` over the nodes.
    pub fn max_norm_defect(&self) -> f64 {
        self.data
            .chunks_exact(self.comps)
            .map(|v| (norm(v) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Projects every node back to the unit sphere. Zero vectors are left as they are.
    pub fn renormalize(&mut self) {
        for v in self.data.chunks_exact_mut(self.comps) {
            normalize(v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies the same linear map (row-major `comps x comps`) to every node.
    pub fn map_values(&mut self, matrix: &[f64]) {
        let c = self.comps;
        let mut tmp = vec![0.0; c];
        for v in self.data.chunks_exact_mut(c) {
            for (r, t) in tmp.iter_mut().enumerate() {
                *t = (0..c).map(|k| matrix[r * c + k] * v[k]).sum();
            }
            v.copy_from_slice(&tmp);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renormalizes_on_construction() {
        let f = SphereMapField::from_fn(4, 3, 3, |i, j, out| {
            out[0] = 1.0 + i as f64;
            out[1] = j as f64;
            out[2] = 2.0;
        })
        .unwrap();
        assert!(f.max_norm_defect() <= 1e-15);
        assert_eq!(f.at(2, 1).len(), 3);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SphereMapField::from_raw(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(SphereMapField::constant(2, 2, 1, &[1.0]).is_err());
        assert!(SphereMapField::from_fn(2, 2, 2, |_, _, o| o[0] = f64::NAN).is_err());
    }
}
