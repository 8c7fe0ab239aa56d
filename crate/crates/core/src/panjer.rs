//! Discretized Panjer recursions: the deterministic reference solution.
//!
//! The severity is put on a lattice of step `Δ`, after which the compound
//! probabilities follow from the discrete recursion
//!
//! ```text
//! g_k = [ (p₁ − (a + b)p₀) f_k + Σ_{j=1..k} (a + b·j/k) f_j g_{k−j} ] / (1 − a f₀)
//! ```
//!
//! whose first term vanishes for the (a, b, 0) class. Generalized Poisson
//! counts are handled through their representation as a Poisson number of
//! Borel-distributed clusters: the cluster-size compound is built by its own
//! recursion and then fed to the Poisson recursion.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dist::{PanjerParams, SeverityModel};
use crate::error::{Error, Result};

/// How the continuous severity is moved onto the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// All mass of `[jΔ − Δ/2, jΔ + Δ/2)` goes to `jΔ`.
    Rounding,
    /// The mass of each cell `[jΔ, (j+1)Δ)` is split between its end points so
    /// that the cell's mass and first moment are preserved.
    #[default]
    LocalMomentMatching,
}

/// Severity masses `f₀..f_K` on the lattice `{0, Δ, …, KΔ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSeverity {
    pub step: f64,
    pub masses: Vec<f64>,
    pub method: Discretization,
}

/// Compound masses `g₀..g_M` on `{0, Δ, …, MΔ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompoundPmf {
    pub step: f64,
    pub masses: Vec<f64>,
    pub model_hash: String,
}

pub fn discretize_severity(
    sev: &SeverityModel,
    step: f64,
    cells: usize,
    method: Discretization,
) -> Result<DiscreteSeverity> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::domain(format!("lattice step must be > 0, got {step}")));
    }
    if cells == 0 {
        return Err(Error::domain("need at least one lattice cell"));
    }
    let mut masses = vec![0.0; cells + 1];
    match method {
        Discretization::Rounding => {
            // survival differences stay accurate in the far tail
            let mut prev = 1.0;
            for (j, m) in masses.iter_mut().enumerate() {
                let s = sev.survival((j as f64 + 0.5) * step);
                *m = (prev - s).max(0.0);
                prev = s;
            }
        }
        Discretization::LocalMomentMatching => {
            let mut s_lo = 1.0;
            for j in 0..cells {
                let lo = j as f64 * step;
                let hi = lo + step;
                let s_hi = sev.survival(hi);
                let mass = (s_lo - s_hi).max(0.0);
                let moment = sev.partial_first_moment(lo, hi);
                let right = ((moment - lo * mass) / step).clamp(0.0, mass);
                masses[j] += mass - right;
                masses[j + 1] += right;
                s_lo = s_hi;
            }
        }
    }
    Ok(DiscreteSeverity { step, masses, method })
}

impl DiscreteSeverity {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Σ jΔ·f_j.
    pub fn mean(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(j, m)| j as f64 * self.step * m)
            .sum()
    }
}

/// General (a, b, 1) recursion with explicit `p₀` and `p₁`.
pub fn panjer_discrete_ab1(
    a: f64,
    b: f64,
    p0: f64,
    p1: f64,
    sev: &DiscreteSeverity,
    max_index: usize,
) -> Result<Vec<f64>> {
    let f = &sev.masses;
    let f0 = f[0];
    let denom = 1.0 - a * f0;
    if !(denom > 0.0) {
        return Err(Error::Instability { denominator: denom });
    }
    // g₀ = Σ pₙ f₀ⁿ
    let mut g0 = p0;
    if f0 > 0.0 {
        let mut pn = p1;
        let mut term = f0;
        let mut n = 1.0;
        while pn * term > 1e-300 && n < 100_000.0 {
            g0 += pn * term;
            n += 1.0;
            pn *= a + b / n;
            term *= f0;
            if pn <= 0.0 {
                break;
            }
        }
    }
    let lead = p1 - (a + b) * p0;
    let jf: Vec<f64> = f.iter().enumerate().map(|(j, v)| j as f64 * v).collect();
    let mut g = Vec::with_capacity(max_index + 1);
    g.push(g0);
    for k in 1..=max_index {
        let top = k.min(f.len() - 1);
        let (mut plain, mut weighted) = (0.0, 0.0);
        for j in 1..=top {
            let gk = g[k - j];
            plain += f[j] * gk;
            weighted += jf[j] * gk;
        }
        let fk = f.get(k).copied().unwrap_or(0.0);
        let v = (lead * fk + a * plain + b * weighted / k as f64) / denom;
        g.push(v.max(0.0));
    }
    Ok(g)
}

/// Compound masses for an (a, b, 0) frequency.
pub fn panjer_discrete(freq: &PanjerParams, sev: &DiscreteSeverity, max_index: usize) -> Result<CompoundPmf> {
    let p1 = (freq.a + freq.b) * freq.p0;
    let masses = panjer_discrete_ab1(freq.a, freq.b, freq.p0, p1, sev, max_index)?;
    Ok(CompoundPmf {
        step: sev.step,
        masses,
        model_hash: String::new(),
    })
}

/// Compound masses for a generalized Poisson(λ, θ) frequency, `0 ≤ θ < 1`.
pub fn gpd_panjer_discrete(lambda: f64, theta: f64, sev: &DiscreteSeverity, max_index: usize) -> Result<CompoundPmf> {
    if !(lambda > 0.0) || !(0.0..1.0).contains(&theta) {
        return Err(Error::domain(format!(
            "GPD recursion needs lambda > 0 and 0 <= theta < 1, got ({lambda}, {theta})"
        )));
    }
    let f = &sev.masses;
    let f0 = f[0];
    let fm = |j: usize| f.get(j).copied().unwrap_or(0.0);

    // cluster sizes: H = F·E, E = exp(θ(H − 1))
    let mut h0 = f0;
    for _ in 0..200 {
        h0 = f0 * (theta * (h0 - 1.0)).exp();
    }
    let e0 = (theta * (h0 - 1.0)).exp();
    let denom = 1.0 - theta * f0 * e0;
    if !(denom > 0.0) {
        return Err(Error::Instability { denominator: denom });
    }
    let mut h = vec![0.0; max_index + 1];
    let mut e = vec![0.0; max_index + 1];
    h[0] = h0;
    e[0] = e0;
    for x in 1..=max_index {
        let mut a_part = 0.0;
        for y in 1..x {
            a_part += y as f64 * h[y] * e[x - y];
        }
        a_part *= theta / x as f64;
        let mut b_part = 0.0;
        for y in 1..=x.min(f.len() - 1) {
            b_part += fm(y) * e[x - y];
        }
        h[x] = ((f0 * a_part + b_part) / denom).max(0.0);
        e[x] = (a_part + theta * e0 * h[x]).max(0.0);
    }
    let clusters = DiscreteSeverity {
        step: sev.step,
        masses: h,
        method: sev.method,
    };
    let params = PanjerParams {
        a: 0.0,
        b: lambda,
        p0: (-lambda).exp(),
    };
    panjer_discrete(&params, &clusters, max_index)
}

impl CompoundPmf {
    pub fn with_hash(mut self, hash: impl Into<String>) -> Self {
        self.model_hash = hash.into();
        self
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn cumulative(&self) -> Vec<f64> {
        self.masses
            .iter()
            .scan(0.0, |acc, g| {
                *acc += g;
                Some(*acc)
            })
            .collect()
    }

    /// Cumulative grid and the smallest grid point with cumulative mass ≥ α.
    pub fn cdf_quantile(&self, alpha: f64) -> Result<(Vec<f64>, f64)> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::domain(format!("quantile level {alpha} outside (0, 1]")));
        }
        let cdf = self.cumulative();
        let total = *cdf.last().unwrap_or(&0.0);
        // a point mass accumulates to 1 up to rounding
        let k = cdf.iter().position(|&c| c >= alpha || (c >= 1.0 - 1e-14 && alpha >= c));
        match k {
            Some(k) => Ok((cdf, k as f64 * self.step)),
            None => Err(Error::Truncation {
                accumulated: total,
                requested: alpha,
            }),
        }
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        self.cdf_quantile(alpha).map(|(_, q)| q)
    }

    fn index_of(&self, x: f64) -> f64 {
        x / self.step
    }

    /// Density estimate `g_k/Δ` at the lattice point nearest to `x`.
    pub fn density_at(&self, x: f64) -> f64 {
        let k = self.index_of(x).round() as usize;
        self.masses.get(k).copied().unwrap_or(0.0) / self.step
    }

    /// `P(Z > x)` from the upper tail of the lattice; a lattice point sitting
    /// at `x` contributes half its mass.
    pub fn survival(&self, x: f64) -> f64 {
        let pos = self.index_of(x);
        let k = pos.round();
        let on_point = (pos - k).abs() < 1e-9;
        let start = if on_point {
            k as usize + 1
        } else {
            pos.floor() as usize + 1
        };
        let mut s: f64 = self.masses.iter().skip(start).sum();
        if on_point {
            s += 0.5 * self.masses.get(k as usize).copied().unwrap_or(0.0);
        }
        s
    }

    /// `P(Z ≤ x)` with the same half-point convention as [`CompoundPmf::survival`].
    pub fn cdf(&self, x: f64) -> f64 {
        self.total_mass() - self.survival(x)
    }

    /// Σ kΔ·g_k.
    pub fn mean(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(k, g)| k as f64 * self.step * g)
            .sum()
    }

    /// `E[Z | Z ≥ q]` over the lattice.
    pub fn tail_mean(&self, q: f64) -> Result<f64> {
        let start = (q / self.step - 1e-9).ceil().max(0.0) as usize;
        let (mut mass, mut moment) = (0.0, 0.0);
        for (k, g) in self.masses.iter().enumerate().skip(start) {
            mass += g;
            moment += k as f64 * self.step * g;
        }
        if mass <= 0.0 {
            return Err(Error::EmptyTail { var: q });
        }
        Ok(moment / mass)
    }

    /// CSV with columns `x,pmf,cdf`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,pmf,cdf")?;
        for (k, (g, c)) in self.masses.iter().zip(self.cumulative()).enumerate() {
            writeln!(w, "{},{:e},{}", k as f64 * self.step, g, c)?;
        }
        Ok(())
    }
}
