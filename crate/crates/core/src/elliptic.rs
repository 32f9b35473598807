//! Complete elliptic integral of the first kind for complex parameter, and the
//! complete hyperbolic metric on the thrice-punctured sphere `C \ {0, 1}`.

#![allow(clippy::excessive_precision)]

use num_complex::Complex64;
use std::f64::consts::PI;

/// Arithmetic-geometric mean with the "right" square root at each step
/// (`|a - b| <= |a + b|`), which reproduces the principal branch of `K`.
fn agm(mut a: Complex64, mut b: Complex64) -> Complex64 {
    for _ in 0..64 {
        let an = 0.5 * (a + b);
        let mut bn = (a * b).sqrt();
        if (an - bn).norm() > (an + bn).norm() {
            bn = -bn;
        }
        let done = (an - bn).norm() <= 1e-16 * an.norm();
        a = an;
        b = bn;
        if done {
            break;
        }
    }
    0.5 * (a + b)
}

/// `K(m) = int_0^{pi/2} (1 - m sin^2 t)^{-1/2} dt`, principal branch with the
/// cut on `[1, inf)`.
pub fn ellip_k(m: Complex64) -> Complex64 {
    ellip_k_complement(Complex64::new(1.0, 0.0) - m)
}

/// `K(1 - m1)`, accurate when `m1` is tiny.
pub fn ellip_k_complement(m1: Complex64) -> Complex64 {
    Complex64::new(PI / 2.0, 0.0) / agm(Complex64::new(1.0, 0.0), m1.sqrt())
}

/// Density `lambda` of the complete curvature `-1` metric `lambda |dz|` on
/// `C \ {0, 1}`:
///
/// ```text
/// lambda(z) = pi / (4 |z| |1 - z| Re(K(1 - z) conj K(z)))
/// ```
///
/// The expression is continuous across the branch cuts of `K`. Near `0` and
/// `1` the evaluation is accurate down to `|z|` of order `1e-300`; for large
/// `|z|` use the inversion `lambda(z) = lambda(1/z) / |z|^2`.
pub fn hyperbolic_density(z: Complex64) -> f64 {
    if z.norm() > 2.0 {
        let w = z.inv();
        return hyperbolic_density(w) * w.norm_sqr();
    }
    let one = Complex64::new(1.0, 0.0);
    let k = ellip_k(z);
    let kp = ellip_k_complement(z);
    PI / (4.0 * z.norm() * (one - z).norm() * (kp * k.conj()).re)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol * b.norm()
    }

    // Values from mpmath.ellipk at 30 digits.
    #[test]
    fn ellip_k_matches_reference() {
        let cases = [
            ((0.3, 0.2), (1.69611655460958994, 0.113495027839537694)),
            ((2.0, -1.0), (1.28298458888421289, -0.909367060937980388)),
            ((-3.0, 0.5), (1.07534626156482014, 0.0391334449812578681)),
            ((0.9, 0.0), (2.57809211334817329, 0.0)),
            ((5.0, 1e-3), (0.742266524644236689, 1.00936966314273374)),
        ];
        for ((mr, mi), (kr, ki)) in cases {
            let k = ellip_k(Complex64::new(mr, mi));
            assert!(close(k, Complex64::new(kr, ki), 1e-13), "K({mr}+{mi}i) = {k}");
        }
    }

    #[test]
    fn density_matches_reference_on_real_axis() {
        let cases = [
            (2.0, 0.228473290522231813),
            (-1.0, 0.228473290522231813),
            (5.0, 0.0524142314350910268),
            (-3.0, 0.0720149648734543072),
            (0.5, 0.913893162088927251),
        ];
        for (x, lam) in cases {
            for eps in [1e-12, -1e-12] {
                let got = hyperbolic_density(Complex64::new(x, eps));
                assert!((got - lam).abs() <= 1e-12 * lam, "lambda({x}) = {got}");
            }
        }
    }

    #[test]
    fn density_has_curvature_minus_one() {
        let h = 2e-4;
        for z in [Complex64::new(0.3, 0.4), Complex64::new(-2.0, 1.5), Complex64::new(1.2, -0.1)] {
            let l = |w: Complex64| hyperbolic_density(w).ln();
            let lap = (l(z + h) + l(z - h) + l(z + Complex64::new(0.0, h)) + l(z - Complex64::new(0.0, h))
                - 4.0 * l(z))
                / (h * h);
            let lam = hyperbolic_density(z);
            assert!((lap / (lam * lam) - 1.0).abs() < 1e-5, "{z}: {}", lap / (lam * lam));
        }
    }

    #[test]
    fn density_has_cusp_asymptotics() {
        // lambda ~ 1 / (|z| log(1/|z|)) near a puncture
        let r: f64 = 1e-40;
        let lam = hyperbolic_density(Complex64::new(r, 0.0));
        let ratio = lam * r * (1.0 / r).ln();
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }
}
