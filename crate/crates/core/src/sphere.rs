//! Small helpers for maps into the round `S^2`.

use num_complex::Complex64;
use rand::Rng;

/// Inverse stereographic projection with `0 -> (0, 0, -1)` and `infinity -> (0, 0, 1)`.
pub fn inverse_stereographic(w: Complex64) -> [f64; 3] {
    let r2 = w.norm_sqr();
    if !r2.is_finite() {
        return [0.0, 0.0, 1.0];
    }
    let d = 1.0 + r2;
    [2.0 * w.re / d, 2.0 * w.im / d, (r2 - 1.0) / d]
}

/// Rotation about the x axis, row-major.
pub fn rotation_x(angle: f64) -> [f64; 9] {
    let (s, c) = angle.sin_cos();
    [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c]
}

/// Rotation about the z axis, row-major.
pub fn rotation_z(angle: f64) -> [f64; 9] {
    let (s, c) = angle.sin_cos();
    [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]
}

pub fn apply3(m: &[f64; 9], v: &[f64]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Uniformly distributed rotation from a random unit quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> [f64; 9] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos());
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ]
}
