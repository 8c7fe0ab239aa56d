//! Single-loss approximations for heavy-tailed compound losses.
//!
//! For sub-exponential severities the compound tail behaves like
//! `F̄_Z(x) ≈ E[N]·F̄(x)`, which inverts to the first-order quantile
//! `F⁻¹(1 − (1 − α)/E[N])`. The second-order refinement rescales the tail
//! level by `1 + c̃·g₁(F⁻¹(α̃))`, where `g₁` is the hazard rate for
//! finite-mean severities and `f(x)∫₀ˣF̄/F̄(x)` otherwise. The little-o
//! remainder is not estimated.
//!
//! Tail indices are stored as the survival index `a` (`F̄ ∈ RV₋ₐ`); the
//! second-order constant `c_β` uses `β = 1/a`.

use std::collections::BTreeMap;

use crate::dist::SeverityModel;
use crate::error::{Error, Result};
use crate::mc::CompoundModel;
use crate::quad::Quadrature;
use crate::special::gamma;

/// Closed-form risk figures at one level, with the intermediate quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SlaResult {
    pub alpha: f64,
    pub var_first: f64,
    pub var_second: Option<f64>,
    pub es: Option<f64>,
    pub srm: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Constants of the second-order expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrderConstants {
    pub c_beta: Option<f64>,
    pub c_tilde: f64,
    /// Limit of `(F̄_Z(x) − E[N]F̄(x))/f(x)`, i.e. `E[X]·E[N(N−1)]`, for finite-mean severities.
    pub limit_constant: Option<f64>,
    pub finite_mean: bool,
}

fn tail_ratio(model: &CompoundModel, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("level {alpha} outside (0, 1)")));
    }
    let mean_count = model.frequency.mean();
    let ratio = (1.0 - alpha) / mean_count;
    if !(mean_count > 0.0) || !(ratio < 1.0) {
        return Err(Error::LevelOutOfRange { ratio });
    }
    Ok(ratio)
}

/// `F⁻¹(1 − (1 − α)/E[N])`.
pub fn sla_var_first_order(model: &CompoundModel, alpha: f64) -> Result<f64> {
    let ratio = tail_ratio(model, alpha)?;
    model.severity.upper_quantile(ratio)
}

/// `c_β = (1 − β)Γ²(1 − 1/β) / (2Γ(1 − 2/β))` for `β > 1`, `c₁ = 1`.
pub fn c_beta(beta: f64) -> Result<f64> {
    if !(beta >= 1.0) || !beta.is_finite() {
        return Err(Error::domain(format!("c_beta needs beta >= 1, got {beta}")));
    }
    if beta == 1.0 {
        return Ok(1.0);
    }
    let denom_arg = 1.0 - 2.0 / beta;
    if denom_arg <= 0.0 && denom_arg.fract() == 0.0 {
        // Γ has a pole there
        return Ok(0.0);
    }
    let g = gamma(1.0 - 1.0 / beta);
    Ok((1.0 - beta) * g * g / (2.0 * gamma(denom_arg)))
}

pub fn second_order_constants(model: &CompoundModel) -> Result<SecondOrderConstants> {
    let en = model.frequency.mean();
    if !(en > 0.0) {
        return Err(Error::domain("second-order constants need E[N] > 0"));
    }
    let enn = model.frequency.factorial_moment2();
    let ex = model.severity.mean();
    let beta = model.severity.tail_index().map(|a| 1.0 / a);
    if ex.is_finite() {
        Ok(SecondOrderConstants {
            c_beta: beta.filter(|&b| b >= 1.0).map(c_beta).transpose()?,
            c_tilde: ex * enn / en,
            limit_constant: Some(ex * enn),
            finite_mean: true,
        })
    } else {
        let beta = beta.ok_or_else(|| {
            Error::UnsupportedModel("infinite-mean severity without a regular-variation index".into())
        })?;
        let c = c_beta(beta)?;
        Ok(SecondOrderConstants {
            c_beta: Some(c),
            c_tilde: c * enn / en,
            limit_constant: None,
            finite_mean: false,
        })
    }
}

/// `∫₀ˣ F̄(s) ds`.
fn integrated_survival(sev: &SeverityModel, x: f64) -> Result<f64> {
    match *sev {
        SeverityModel::Pareto {
            tail_index: a,
            scale: s,
        } if a != 1.0 => Ok(s * (1.0 - (1.0 + x / s).powf(1.0 - a)) / (a - 1.0)),
        SeverityModel::Pareto { scale: s, .. } => Ok(s * (x / s).ln_1p()),
        _ => Ok(Quadrature::with_rel_tol(1e-10)
            .integrate(|t| sev.survival(t), 0.0, x)?
            .value),
    }
}

/// The correction function `g₁` at `x`.
pub fn correction_g1(sev: &SeverityModel, x: f64) -> Result<f64> {
    let hazard = sev.density(x) / sev.survival(x);
    if sev.mean().is_finite() {
        Ok(hazard)
    } else {
        Ok(hazard * integrated_survival(sev, x)?)
    }
}

/// The second-order quantile for a given correction value `g1`.
pub fn second_order_quantile(model: &CompoundModel, alpha: f64, c_tilde: f64, g1: f64) -> Result<f64> {
    let ratio = tail_ratio(model, alpha)?;
    let factor = 1.0 + c_tilde * g1;
    if !(factor > 0.0) {
        return Err(Error::DegenerateCorrection { factor });
    }
    model.severity.upper_quantile(ratio / factor)
}

/// First- and second-order VaR with diagnostics.
pub fn sla_var_second_order(model: &CompoundModel, alpha: f64) -> Result<SlaResult> {
    let var_first = sla_var_first_order(model, alpha)?;
    let consts = second_order_constants(model)?;
    let ratio = tail_ratio(model, alpha)?;
    let g1 = correction_g1(&model.severity, var_first)?;
    let var_second = second_order_quantile(model, alpha, consts.c_tilde, g1)?;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("alpha_tilde".to_string(), 1.0 - ratio);
    diagnostics.insert("g1".to_string(), g1);
    diagnostics.insert("c_tilde".to_string(), consts.c_tilde);
    diagnostics.insert("correction_factor".to_string(), 1.0 + consts.c_tilde * g1);
    if let Some(c) = consts.c_beta {
        diagnostics.insert("c_beta".to_string(), c);
    }
    if let Some(a) = model.severity.tail_index() {
        diagnostics.insert("tail_index".to_string(), a);
    }
    Ok(SlaResult {
        alpha,
        var_first,
        var_second: Some(var_second),
        es: None,
        srm: None,
        diagnostics,
    })
}

/// `K = ∫₁^∞ s^(ξ−2) φ(1 − 1/s) ds`, with `ξ = 1/a` the quantile tail exponent.
pub fn spectral_factor<F: Fn(f64) -> f64>(xi: f64, phi: F) -> Result<f64> {
    // s = 1/t turns the range into (0, 1]
    Ok(Quadrature::with_rel_tol(1e-9)
        .integrate(|t| t.powf(-xi) * phi(1.0 - t), 0.0, 1.0)?
        .value)
}

/// Asymptotic ES and SRM for a power-law severity:
/// `ES ≈ VaR·a/(a − 1)` and `SRM ≈ K(φ)·VaR`.
pub fn sla_es_srm<F: Fn(f64) -> f64>(model: &CompoundModel, alpha: f64, phi: F) -> Result<(f64, f64)> {
    let a = model.severity.tail_index().ok_or_else(|| {
        Error::UnsupportedModel("asymptotic ES needs a regularly varying severity; use the Panjer oracle".into())
    })?;
    if a <= 1.0 {
        return Err(Error::domain(format!("ES is infinite for tail index {a} <= 1")));
    }
    let var = sla_var_first_order(model, alpha)?;
    let k = spectral_factor(1.0 / a, phi)?;
    Ok((var * a / (a - 1.0), k * var))
}

/// `F̄*²(x)/F̄(x)`, which tends to 2 for sub-exponential laws.
///
/// Uses `F̄*²(x) = 2∫₀^{x/2} F̄(x − y) f(y) dy + F̄(x/2)²`, which has no
/// cancellation far in the tail.
pub fn subexp_tail_ratio(sev: &SeverityModel, x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("tail ratio at {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if matches!(sev, SeverityModel::Degenerate { .. }) {
        return Err(Error::UnsupportedModel("tail ratio needs a severity density".into()));
    }
    let half = 0.5 * x;
    let q = Quadrature::with_rel_tol(1e-6);
    // split where the severity density peaks for a cleaner first pass
    let breaks: Vec<f64> = [sev.quantile_unchecked(0.5), sev.quantile_unchecked(0.99)]
        .into_iter()
        .filter(|&b| b < half)
        .collect();
    let conv = q.integrate_with_breaks(|y| sev.survival(x - y) * sev.density(y), 0.0, half, &breaks)?;
    let sh = sev.survival(half);
    Ok((2.0 * conv.value + sh * sh) / sev.survival(x))
}
