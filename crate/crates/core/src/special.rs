//! Normal distribution helpers and the gamma function.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::erf::{erfc, erfc_inv};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Φ(x), accurate in the lower tail.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// 1 − Φ(x), accurate in the upper tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Φ⁻¹(p) for p in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Γ(x) on the real line (poles at the non-positive integers).
pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection keeps the Lanczos sum on its accurate half-line
        PI / ((PI * x).sin() * statrs::function::gamma::gamma(1.0 - x))
    } else {
        statrs::function::gamma::gamma(x)
    }
}
