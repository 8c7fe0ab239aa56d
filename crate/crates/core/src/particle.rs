//! Path-space importance sampling for the continuous Panjer equation.
//!
//! The density of the absolutely continuous part of `Z` solves a linear
//! Volterra equation of the second kind,
//!
//! ```text
//! f_Z(x) = g(x) + ∫₀ˣ k(x, x₁) f_Z(x₁) dx₁,
//! g(x) = p₁ f_X(x),    k(x, x₁) = (a + b (x − x₁)/x) f_X(x − x₁),
//! ```
//!
//! whose Neumann series is a sum over strictly decreasing paths
//! `x₀ > x₁ > … > x_n`. A Markov chain with absorption probability `P_d`
//! samples such paths, and each path carries the importance weight
//!
//! ```text
//! W = [1/μ(x₀)] · ∏ⱼ k(x_{j−1}, x_j)/M(x_{j−1}, x_j) · g(x_n)/P_d ,
//! ```
//!
//! an unbiased estimate of `f_Z(x₀)`. The atom `P(Z = 0) = p₀` is not part of
//! the equation and is added exactly when distribution functions are formed.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF};

use crate::dist::{FrequencyModel, SeverityModel};
use crate::error::{Error, Result};
use crate::mc::CompoundModel;
use crate::rng::{substream, UniformSource};

const CHUNK: usize = 1 << 13;
const STREAM_GRID: u64 = 0x4752;
const STREAM_INTERVAL: u64 = 0x494e;

/// The pair `(g, k)` of the Volterra equation for one compound model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolterraKernel {
    pub a: f64,
    pub b: f64,
    /// `P(N = 1)` in the recursion, the weight of the free term.
    pub p1: f64,
    /// `P(N = 0)`, kept outside the equation.
    pub p0: f64,
    pub severity: SeverityModel,
    /// Generalized Poisson kernel `λ/(λ+θ)·(θ + λ(x−x₁)/x)`.
    pub gpd_mode: bool,
}

pub fn build_volterra_kernel(model: &CompoundModel) -> Result<VolterraKernel> {
    model.validate()?;
    if let SeverityModel::Degenerate { .. } = model.severity {
        return Err(Error::UnsupportedModel(
            "the integral equation needs a severity with a density".into(),
        ));
    }
    if let FrequencyModel::GeneralizedPoisson { lambda, theta } = model.frequency {
        if !(lambda + theta > 0.0) {
            return Err(Error::UnsupportedModel(format!(
                "GPD kernel needs lambda + theta > 0, got ({lambda}, {theta})"
            )));
        }
        let s = lambda / (lambda + theta);
        return Ok(VolterraKernel {
            a: s * theta,
            b: s * lambda,
            p1: lambda * (-lambda - theta).exp(),
            p0: (-lambda).exp(),
            severity: model.severity,
            gpd_mode: true,
        });
    }
    let p = model.frequency.panjer_params()?;
    Ok(VolterraKernel {
        a: p.a,
        b: p.b,
        p1: (p.a + p.b) * p.p0,
        p0: p.p0,
        severity: model.severity,
        gpd_mode: false,
    })
}

impl VolterraKernel {
    pub fn g(&self, x: f64) -> f64 {
        self.p1 * self.severity.density(x)
    }

    /// Zero off the strictly decreasing support `x₁ < x`.
    pub fn k(&self, x: f64, x1: f64) -> f64 {
        if !(x1 < x) || x <= 0.0 {
            return 0.0;
        }
        let y = x - x1;
        self.factor(x, y) * self.severity.density(y)
    }

    /// `a + b·y/x`, the kernel without the severity density.
    fn factor(&self, x: f64, y: f64) -> f64 {
        self.a + self.b * y / x
    }
}

/// Transition density `M(x, ·)` of the path chain before absorption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Proposal {
    /// Decrement `y = x − x₁` drawn from the severity conditioned on `y < x`.
    /// The severity density cancels in `k/M`.
    #[default]
    TruncatedSeverity,
    /// Multiplicative step `x₁ = x(1 − D)` with decrement fraction
    /// `D ~ Beta(dκ, (1−d)κ)`, `d = E[X]/x` clipped to `[0.05, 0.95]`.
    Beta { concentration: f64 },
    /// `x₁` uniform on `(0, x)`.
    Uniform,
}

impl Proposal {
    fn validate(&self) -> Result<()> {
        if let Proposal::Beta { concentration } = *self {
            if !(concentration > 0.0) || !concentration.is_finite() {
                return Err(Error::domain(format!(
                    "beta concentration must be > 0, got {concentration}"
                )));
            }
        }
        Ok(())
    }

    fn beta_at(&self, sev: &SeverityModel, x: f64) -> Option<Beta> {
        match *self {
            Proposal::Beta { concentration } => {
                let d = (sev.mean() / x).clamp(0.05, 0.95);
                Beta::new(d * concentration, (1.0 - d) * concentration).ok()
            }
            _ => None,
        }
    }

    /// Draws `x₁ < x` given that the chain moves.
    fn draw<S: UniformSource + ?Sized>(&self, sev: &SeverityModel, x: f64, src: &mut S) -> Result<f64> {
        let u = src.uniform()?;
        let next = match self {
            Proposal::TruncatedSeverity => {
                let fx = sev.cdf(x);
                let p = u * fx;
                if !(p > 0.0) {
                    // nothing below x: the path is dead and weighs 0
                    0.0
                } else if p < 0.5 {
                    x - sev.quantile_unchecked(p)
                } else {
                    // upper branch keeps y < x when F(x) rounds to 1
                    x - sev.upper_quantile(sev.survival(x) + (1.0 - u) * fx)?
                }
            }
            Proposal::Beta { .. } => {
                let beta = self
                    .beta_at(sev, x)
                    .ok_or_else(|| Error::domain("invalid beta proposal"))?;
                let next = x - x * beta.inverse_cdf(u);
                // a decrement below the resolution of x ends the path with weight 0
                if next >= x {
                    0.0
                } else {
                    next
                }
            }
            Proposal::Uniform => x * (1.0 - u),
        };
        if !(next < x) || next.is_nan() {
            return Err(Error::ProposalSupport {
                current: x,
                proposed: next,
            });
        }
        Ok(next.max(0.0))
    }

    /// Density of a move from `x` to `x₁`, conditional on not absorbing.
    pub fn move_density(&self, sev: &SeverityModel, x: f64, x1: f64) -> f64 {
        if !(x1 < x) || x1 < 0.0 {
            return 0.0;
        }
        match self {
            Proposal::TruncatedSeverity => {
                let fx = sev.cdf(x);
                if fx <= 0.0 {
                    0.0
                } else {
                    sev.density(x - x1) / fx
                }
            }
            Proposal::Beta { .. } => match self.beta_at(sev, x) {
                Some(beta) => beta.pdf((x - x1) / x) / x,
                None => 0.0,
            },
            Proposal::Uniform => 1.0 / x,
        }
    }

    /// `k(x, x₁)` divided by the conditional move density.
    fn step_ratio(&self, kernel: &VolterraKernel, x: f64, x1: f64) -> Result<f64> {
        if x1 <= 0.0 {
            return Ok(0.0);
        }
        match self {
            Proposal::TruncatedSeverity => Ok(kernel.factor(x, x - x1) * kernel.severity.cdf(x)),
            _ => {
                let k = kernel.k(x, x1);
                if k == 0.0 {
                    return Ok(0.0);
                }
                let m = self.move_density(&kernel.severity, x, x1);
                if !(m > 0.0) {
                    return Err(Error::SupportViolation { from: x, to: x1 });
                }
                Ok(k / m)
            }
        }
    }
}

/// How a path is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    /// `g` is evaluated once, at the absorbed state, and divided by `P_d`.
    #[default]
    Absorption,
    /// `g` is accumulated at every visited state; `P_d` only ends the path.
    Collision,
}

/// Initial law `μ` of the path chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialLaw {
    /// Point-wise mode: `μ = δ_{x₀}`, with `μ(x₀) ≡ 1` in the weight.
    Point(f64),
    /// Interval mode: uniform density on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSamplerConfig {
    pub proposal: Proposal,
    /// Absorption probability `P_d ∈ (0, 1]`.
    pub absorption: f64,
    pub initial: InitialLaw,
    /// Particles per estimate.
    pub particles: usize,
    /// Point-wise mode only: always take the first step, then add `g(x₀)`
    /// exactly instead of estimating it.
    pub variance_reduction: bool,
    pub score: Score,
}

impl PathSamplerConfig {
    /// Point-wise defaults for `model`: truncated-severity proposal,
    /// `P_d = 1/(1 + E[N])`, variance reduction on.
    pub fn pointwise(model: &CompoundModel, x0: f64, particles: usize) -> Self {
        PathSamplerConfig {
            proposal: Proposal::default(),
            absorption: default_absorption(model),
            initial: InitialLaw::Point(x0),
            particles,
            variance_reduction: true,
            score: Score::default(),
        }
    }

    pub fn interval(model: &CompoundModel, lo: f64, hi: f64, particles: usize) -> Self {
        PathSamplerConfig {
            proposal: Proposal::default(),
            absorption: default_absorption(model),
            initial: InitialLaw::Uniform { lo, hi },
            particles,
            variance_reduction: false,
            score: Score::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(Error::domain(format!(
                "absorption probability {} outside (0, 1]",
                self.absorption
            )));
        }
        if self.particles == 0 {
            return Err(Error::domain("particle count must be at least 1"));
        }
        match self.initial {
            InitialLaw::Point(x0) if !(x0 > 0.0 && x0.is_finite()) => {
                return Err(Error::domain(format!("start point must be finite and > 0, got {x0}")));
            }
            InitialLaw::Uniform { lo, hi } if !(lo >= 0.0 && hi > lo && hi.is_finite()) => {
                return Err(Error::domain(format!("need 0 <= lo < hi, got [{lo}, {hi}]")));
            }
            _ => {}
        }
        self.proposal.validate()
    }

    fn forced_first_step(&self) -> bool {
        self.variance_reduction && matches!(self.initial, InitialLaw::Point(_)) && self.absorption < 1.0
    }
}

pub fn default_absorption(model: &CompoundModel) -> f64 {
    1.0 / (1.0 + model.frequency.mean())
}

/// One path `x₀ > x₁ > … > x_n` of the absorbed chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub states: Vec<f64>,
    /// First move taken without an absorption trial.
    pub forced_first: bool,
    pub weight: Option<f64>,
}

impl PathSample {
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.states.len() == 1
    }
}

fn draw_start<S: UniformSource + ?Sized>(cfg: &PathSamplerConfig, src: &mut S) -> Result<f64> {
    Ok(match cfg.initial {
        InitialLaw::Point(x0) => x0,
        InitialLaw::Uniform { lo, hi } => hi - (hi - lo) * src.uniform()?,
    })
}

pub fn simulate_absorbed_path<S: UniformSource + ?Sized>(
    cfg: &PathSamplerConfig,
    kernel: &VolterraKernel,
    src: &mut S,
) -> Result<PathSample> {
    cfg.validate()?;
    let mut x = draw_start(cfg, src)?;
    let mut states = vec![x];
    let forced = cfg.forced_first_step();
    if forced {
        x = cfg.proposal.draw(&kernel.severity, x, src)?;
        states.push(x);
    }
    while x > 0.0 && src.uniform()? > cfg.absorption {
        x = cfg.proposal.draw(&kernel.severity, x, src)?;
        states.push(x);
    }
    Ok(PathSample {
        states,
        forced_first: forced,
        weight: None,
    })
}

fn initial_factor(cfg: &PathSamplerConfig) -> f64 {
    match cfg.initial {
        InitialLaw::Point(_) => 1.0,
        InitialLaw::Uniform { lo, hi } => hi - lo,
    }
}

/// Importance weight of a path generated under `cfg`.
///
/// With a forced first step the weight estimates `f_Z(x₀) − g(x₀)`.
pub fn path_weight(path: &PathSample, kernel: &VolterraKernel, cfg: &PathSamplerConfig) -> Result<f64> {
    let s = &path.states;
    for w in s.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::ProposalSupport {
                current: w[0],
                proposed: w[1],
            });
        }
    }
    let pd = cfg.absorption;
    let mut w = initial_factor(cfg);
    let mut total = if path.forced_first { 0.0 } else { w * kernel.g(s[0]) };
    for (j, pair) in s.windows(2).enumerate() {
        let ratio = cfg.proposal.step_ratio(kernel, pair[0], pair[1])?;
        let survive = if j == 0 && path.forced_first { 1.0 } else { 1.0 - pd };
        w *= ratio / survive;
        total += w * kernel.g(pair[1]);
    }
    Ok(match cfg.score {
        Score::Absorption => w * kernel.g(*s.last().expect("path has a start")) / pd,
        Score::Collision => total,
    })
}

/// Draws one path and returns its weight without storing the states.
fn sample_weight<S: UniformSource + ?Sized>(
    cfg: &PathSamplerConfig,
    kernel: &VolterraKernel,
    x0: f64,
    src: &mut S,
) -> Result<f64> {
    let pd = cfg.absorption;
    let collision = cfg.score == Score::Collision;
    let mut x = x0;
    let mut w = 1.0;
    let mut total = 0.0;
    if cfg.forced_first_step() {
        let next = cfg.proposal.draw(&kernel.severity, x, src)?;
        w *= cfg.proposal.step_ratio(kernel, x, next)?;
        x = next;
    }
    if collision {
        total += w * kernel.g(x);
    }
    while src.uniform()? > pd {
        if w == 0.0 || x <= 0.0 {
            return Ok(if collision { total } else { 0.0 });
        }
        let next = cfg.proposal.draw(&kernel.severity, x, src)?;
        w *= cfg.proposal.step_ratio(kernel, x, next)? / (1.0 - pd);
        x = next;
        if collision {
            total += w * kernel.g(x);
        }
    }
    Ok(if collision { total } else { w * kernel.g(x) / pd })
}

/// Whether a measure holds grid densities or sampled atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureMode {
    PointwiseGrid,
    Interval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub x: f64,
    /// Raw weight: a density estimate on a grid, a path weight otherwise.
    pub weight: f64,
    /// Contribution to the distribution function.
    pub mass: f64,
}

/// Weighted atoms approximating the law of `Z` away from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParticleMeasure {
    pub mode: MeasureMode,
    /// Sorted by location.
    pub atoms: Vec<Atom>,
    /// Exact `P(Z = 0)`.
    pub zero_mass: f64,
    /// Grid mode: standard error of each density estimate.
    pub stderr: Vec<f64>,
    /// Particles behind each grid estimate, or in total for interval mode.
    pub particles: usize,
}

/// Linear or explicit grid of evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    Linear { width: f64, end: f64 },
    Points { points: Vec<f64> },
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<f64>> {
        let pts = match self {
            GridSpec::Linear { width, end } => {
                if !(*width > 0.0) || !(*end >= *width) {
                    return Err(Error::domain(format!(
                        "grid needs 0 < width <= end, got ({width}, {end})"
                    )));
                }
                let n = (end / width + 1e-9).floor() as usize;
                (1..=n).map(|m| m as f64 * width).collect()
            }
            GridSpec::Points { points } => points.clone(),
        };
        if pts.is_empty() || pts.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::domain("grid points must be finite and > 0"));
        }
        if pts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("grid points must increase strictly"));
        }
        Ok(pts)
    }
}

/// Cell widths for a grid: each point owns half the gap to either neighbour,
/// the first point reaches down to 0 and the last mirrors its left gap.
fn cell_widths(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    (0..n)
        .map(|i| {
            let left = if i == 0 { grid[0] } else { grid[i] - grid[i - 1] };
            let right = if i + 1 < n { grid[i + 1] - grid[i] } else { left };
            0.5 * (left + right)
        })
        .collect()
}

/// Sum and sum of squares in chunks so the total only depends on chunking.
fn chunked_moments<F>(particles: usize, f: F) -> Result<(f64, f64)>
where
    F: Fn(usize, usize) -> Result<Vec<f64>> + Sync,
{
    let chunks: Vec<(usize, usize)> = (0..particles)
        .step_by(CHUNK)
        .enumerate()
        .map(|(i, start)| (i, CHUNK.min(particles - start)))
        .collect();
    let parts: Result<Vec<(f64, f64)>> = chunks
        .par_iter()
        .map(|&(i, len)| {
            let w = f(i, len)?;
            Ok((
                pairwise_sum(&w),
                pairwise_sum(&w.iter().map(|v| v * v).collect::<Vec<_>>()),
            ))
        })
        .collect();
    Ok(parts?.into_iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1)))
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let (l, r) = v.split_at(v.len() / 2);
    pairwise_sum(l) + pairwise_sum(r)
}

fn mean_and_stderr(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Density estimate and standard error at one point, `cfg.particles` paths.
pub fn estimate_density_at(
    kernel: &VolterraKernel,
    x0: f64,
    cfg: &PathSamplerConfig,
    seed: u64,
    point_index: u64,
) -> Result<(f64, f64)> {
    let mut cfg = *cfg;
    cfg.initial = InitialLaw::Point(x0);
    cfg.validate()?;
    if cfg.absorption == 1.0 {
        // the chain never moves: every weight is g(x₀)
        return Ok((kernel.g(x0), 0.0));
    }
    let (sum, sum_sq) = chunked_moments(cfg.particles, |chunk, len| {
        let mut rng = substream(seed, &[STREAM_GRID, point_index, chunk as u64]);
        (0..len).map(|_| sample_weight(&cfg, kernel, x0, &mut rng)).collect()
    })?;
    let (mean, se) = mean_and_stderr(sum, sum_sq, cfg.particles);
    let offset = if cfg.forced_first_step() { kernel.g(x0) } else { 0.0 };
    Ok((offset + mean, se))
}

/// Point-wise density estimates `f̂_Z` on `grid`, `cfg.particles` paths per point.
pub fn estimate_density_grid(
    model: &CompoundModel,
    grid: &[f64],
    cfg: &PathSamplerConfig,
    seed: u64,
) -> Result<WeightedParticleMeasure> {
    let kernel = build_volterra_kernel(model)?;
    let pts = GridSpec::Points { points: grid.to_vec() }.points()?;
    let estimates: Result<Vec<(f64, f64)>> = pts
        .par_iter()
        .enumerate()
        .map(|(i, &x)| estimate_density_at(&kernel, x, cfg, seed, i as u64))
        .collect();
    let estimates = estimates?;
    let widths = cell_widths(&pts);
    let atoms = pts
        .iter()
        .zip(&estimates)
        .zip(&widths)
        .map(|((&x, &(d, _)), &w)| Atom {
            x,
            weight: d,
            mass: d * w,
        })
        .collect();
    Ok(WeightedParticleMeasure {
        mode: MeasureMode::PointwiseGrid,
        atoms,
        zero_mass: kernel.p0,
        stderr: estimates.iter().map(|e| e.1).collect(),
        particles: cfg.particles,
    })
}

/// `cfg.particles` weighted atoms with starts uniform on `[lo, hi]`.
pub fn estimate_measure_interval(
    model: &CompoundModel,
    lo: f64,
    hi: f64,
    cfg: &PathSamplerConfig,
    seed: u64,
) -> Result<WeightedParticleMeasure> {
    let kernel = build_volterra_kernel(model)?;
    let mut cfg = *cfg;
    cfg.initial = InitialLaw::Uniform { lo, hi };
    cfg.variance_reduction = false;
    cfg.validate()?;
    let n = cfg.particles;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .enumerate()
        .map(|(i, start)| (i, CHUNK.min(n - start)))
        .collect();
    let parts: Result<Vec<Vec<Atom>>> = chunks
        .par_iter()
        .map(|&(i, len)| {
            let mut rng = substream(seed, &[STREAM_INTERVAL, i as u64]);
            (0..len)
                .map(|_| {
                    let x0 = draw_start(&cfg, &mut rng)?;
                    let w = (hi - lo) * sample_weight(&cfg, &kernel, x0, &mut rng)?;
                    Ok(Atom {
                        x: x0,
                        weight: w,
                        mass: w / n as f64,
                    })
                })
                .collect()
        })
        .collect();
    let mut atoms = parts?.concat();
    atoms.sort_by(|a, b| a.x.total_cmp(&b.x));
    Ok(WeightedParticleMeasure {
        mode: MeasureMode::Interval,
        atoms,
        zero_mass: kernel.p0,
        stderr: Vec::new(),
        particles: n,
    })
}

/// VaR, self-normalized ES, raw tail sum and spectral measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureRisk {
    pub var: f64,
    pub es: f64,
    /// `Σ xᵢ mᵢ` over atoms at or above VaR, without normalization.
    pub tail_sum: f64,
    pub srm: f64,
}

/// Quantile with a normal-approximation band from the cumulative's standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureQuantile {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl WeightedParticleMeasure {
    pub fn total_mass(&self) -> f64 {
        self.zero_mass + self.atoms.iter().map(|a| a.mass).sum::<f64>()
    }

    /// `F̂_Z(z)`, including the atom at zero.
    pub fn cdf(&self, z: f64) -> f64 {
        if z < 0.0 {
            return 0.0;
        }
        self.zero_mass + self.atoms.iter().take_while(|a| a.x <= z).map(|a| a.mass).sum::<f64>()
    }

    /// Standard error of [`WeightedParticleMeasure::cdf`] at `z`.
    pub fn cdf_stderr(&self, z: f64) -> f64 {
        match self.mode {
            MeasureMode::PointwiseGrid => self
                .atoms
                .iter()
                .zip(&self.stderr)
                .take_while(|(a, _)| a.x <= z)
                .map(|(a, se)| {
                    let width = if a.weight != 0.0 { a.mass / a.weight } else { 0.0 };
                    (width * se).powi(2)
                })
                .sum::<f64>()
                .sqrt(),
            MeasureMode::Interval => {
                let n = self.particles as f64;
                let (s1, s2) = self
                    .atoms
                    .iter()
                    .take_while(|a| a.x <= z)
                    .fold((0.0, 0.0), |acc, a| (acc.0 + a.weight, acc.1 + a.weight * a.weight));
                let mean = s1 / n;
                ((s2 / n - mean * mean).max(0.0) / (n - 1.0).max(1.0)).sqrt()
            }
        }
    }

    fn cumulative(&self) -> Vec<f64> {
        self.atoms
            .iter()
            .scan(self.zero_mass, |acc, a| {
                *acc += a.mass;
                Some(*acc)
            })
            .collect()
    }

    fn first_reaching(&self, cum: &[f64], p: f64) -> Option<f64> {
        if self.zero_mass >= p {
            return Some(0.0);
        }
        cum.iter().position(|&c| c >= p).map(|i| self.atoms[i].x)
    }

    /// Smallest location whose cumulative mass reaches `p`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::domain(format!("quantile level {p} outside (0, 1]")));
        }
        let cum = self.cumulative();
        self.first_reaching(&cum, p).ok_or(Error::Truncation {
            accumulated: cum.last().copied().unwrap_or(self.zero_mass),
            requested: p,
        })
    }

    /// Quantile with a band from shifting the cumulative by ±`z_score` standard errors.
    pub fn quantile_ci(&self, p: f64, z_score: f64) -> Result<MeasureQuantile> {
        let point = self.quantile(p)?;
        let cum = self.cumulative();
        let se: Vec<f64> = self.atoms.iter().map(|a| self.cdf_stderr(a.x)).collect();
        let up: Vec<f64> = cum.iter().zip(&se).map(|(c, s)| c + z_score * s).collect();
        let down: Vec<f64> = cum.iter().zip(&se).map(|(c, s)| c - z_score * s).collect();
        let lower = self.first_reaching(&up, p).unwrap_or(point);
        let upper = self.first_reaching(&down, p).unwrap_or(f64::INFINITY);
        Ok(MeasureQuantile { point, lower, upper })
    }

    /// VaR at `alpha`, ES over atoms at or above it, and the spectral measure
    /// `Σ xᵢ φ(pᵢ) Δpᵢ` with `pᵢ` the normalized cumulative mass.
    pub fn risk_measures(&self, alpha: f64, phi: &dyn Fn(f64) -> f64) -> Result<MeasureRisk> {
        let var = self.quantile(alpha)?;
        let (mut tail_mass, mut tail_sum) = (0.0, 0.0);
        for a in self.atoms.iter().filter(|a| a.x >= var) {
            tail_mass += a.mass;
            tail_sum += a.x * a.mass;
        }
        if var == 0.0 {
            tail_mass += self.zero_mass;
        }
        if !(tail_mass > 0.0) {
            return Err(Error::EmptyTail { var });
        }
        let total = self.total_mass();
        let mut p = self.zero_mass / total;
        let mut srm = 0.0;
        for a in &self.atoms {
            let dp = a.mass / total;
            p += dp;
            srm += a.x * phi(p) * dp;
        }
        Ok(MeasureRisk {
            var,
            es: tail_sum / tail_mass,
            tail_sum,
            srm,
        })
    }

    /// CSV with columns `x,weight,cumulative`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,weight,cumulative")?;
        for (a, c) in self.atoms.iter().zip(self.cumulative()) {
            writeln!(w, "{},{:e},{}", a.x, a.weight, c)?;
        }
        Ok(())
    }

    /// Grid mode only: CSV with columns `x,density,stderr`.
    pub fn write_density_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.mode != MeasureMode::PointwiseGrid {
            return Err(Error::domain("density export needs a grid measure"));
        }
        writeln!(w, "x,density,stderr")?;
        for (a, se) in self.atoms.iter().zip(&self.stderr) {
            writeln!(w, "{},{:e},{:e}", a.x, a.weight, se)?;
        }
        Ok(())
    }
}

pub fn quantile_from_measure(measure: &WeightedParticleMeasure, p: f64) -> Result<f64> {
    measure.quantile(p)
}

pub fn risk_measures_from_measure(
    measure: &WeightedParticleMeasure,
    alpha: f64,
    phi: &dyn Fn(f64) -> f64,
) -> Result<MeasureRisk> {
    measure.risk_measures(alpha, phi)
}
