//! Experiment configuration, orchestration and report emission.
//!
//! A run is described by one JSON document:
//!
//! ```json
//! {
//!   "model": {"frequency": {"kind": "poisson", "lambda": 2.0},
//!             "severity": {"kind": "lognormal", "mu": 2.0, "sigma": 1.0}},
//!   "method": {"kind": "sla"},
//!   "levels": [0.9, 0.99],
//!   "seed": 7
//! }
//! ```
//!
//! Every estimator underneath is chunked on fixed substreams and reduced in
//! chunk order, so a report depends only on the configuration.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asymptotics::{sla_es_srm, sla_var_first_order, sla_var_second_order};
use crate::dist::FrequencyModel;
use crate::error::{Error, Result};
use crate::mc::CompoundModel;
use crate::panjer::{discretize_severity, gpd_panjer_discrete, panjer_discrete, CompoundPmf, Discretization};
use crate::particle::{
    default_absorption, estimate_density_grid, estimate_measure_interval, GridSpec, PathSamplerConfig, Proposal, Score,
    WeightedParticleMeasure,
};
use crate::smc::{
    replicate_seed, smc_rare_event, CompoundTail, LevelSequence, ReplicateSummary, Resampling, SmcConfig,
};
use crate::special::normal_quantile;

pub const DEFAULT_LEVELS: [f64; 7] = [0.5, 0.8, 0.9, 0.95, 0.99, 0.999, 0.9995];

fn default_levels() -> Vec<f64> {
    DEFAULT_LEVELS.to_vec()
}

/// Weight function `φ` of a spectral risk measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralWeight {
    /// `φ ≡ 1`, giving the mean.
    Expectation,
    /// `φ(u) = k·e^{−k(1−u)}/(1 − e^{−k})`.
    Exponential { k: f64 },
}

impl SpectralWeight {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            SpectralWeight::Expectation => 1.0,
            SpectralWeight::Exponential { k } => k * (-k * (1.0 - u)).exp() / -(-k).exp_m1(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SpectralWeight::Exponential { k } if !(k > 0.0 && k.is_finite()) => {
                Err(Error::config("spectral.k", format!("must be finite and > 0, got {k}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Estimator and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodConfig {
    /// Crude Monte Carlo with `samples` annual losses.
    Mc {
        #[serde(default = "defaults::mc_samples")]
        samples: usize,
        /// Coverage of the order-statistic interval around each quantile.
        #[serde(default = "defaults::ci_level")]
        ci_level: f64,
    },
    /// Closed-form single-loss approximation.
    Sla {
        #[serde(default)]
        second_order: bool,
    },
    /// Discretized recursion on a lattice of step `step`.
    Panjer {
        #[serde(default = "defaults::panjer_step")]
        step: f64,
        #[serde(default)]
        discretization: Discretization,
        /// Lattice end; doubled until the top level is covered when absent.
        #[serde(default)]
        max_loss: Option<f64>,
    },
    /// Path-space importance sampling of the Volterra solution.
    Particle {
        #[serde(default = "defaults::particles")]
        particles: usize,
        /// Point-wise grid; width 1 up to three times the top-level SLA when absent.
        #[serde(default)]
        grid: Option<GridSpec>,
        /// Interval `[lo, hi]` for the measure mode; replaces the grid.
        #[serde(default)]
        interval: Option<[f64; 2]>,
        #[serde(default)]
        absorption: Option<f64>,
        #[serde(default)]
        proposal: Proposal,
        #[serde(default)]
        score: Score,
        #[serde(default = "defaults::yes")]
        variance_reduction: bool,
        #[serde(default = "defaults::z_score")]
        z_score: f64,
    },
    /// Multilevel splitting for `P(Z > z)` at each threshold of a ladder.
    RareEvent {
        thresholds: Vec<f64>,
        #[serde(default = "defaults::smc_particles")]
        particles: usize,
        #[serde(default = "defaults::mh_steps")]
        mh_steps: usize,
        /// Correlation of the latent Gaussian move.
        #[serde(default = "defaults::rho")]
        rho: f64,
        #[serde(default = "defaults::replicates")]
        replicates: usize,
        #[serde(default)]
        resampling: Resampling,
    },
}

mod defaults {
    pub fn mc_samples() -> usize {
        1_000_000
    }
    pub fn ci_level() -> f64 {
        0.95
    }
    pub fn panjer_step() -> f64 {
        0.01
    }
    pub fn particles() -> usize {
        50_000
    }
    pub fn yes() -> bool {
        true
    }
    pub fn z_score() -> f64 {
        1.96
    }
    pub fn smc_particles() -> usize {
        10_000
    }
    pub fn mh_steps() -> usize {
        5
    }
    pub fn rho() -> f64 {
        0.9
    }
    pub fn replicates() -> usize {
        10
    }
}

impl MethodConfig {
    pub fn tag(&self) -> Method {
        match self {
            MethodConfig::Mc { .. } => Method::Mc,
            MethodConfig::Sla { .. } => Method::Sla,
            MethodConfig::Panjer { .. } => Method::Panjer,
            MethodConfig::Particle { .. } => Method::Particle,
            MethodConfig::RareEvent { .. } => Method::RareEvent,
        }
    }

    /// Parameters left at their defaults.
    pub fn default_for(method: Method) -> Option<Self> {
        let text = match method {
            Method::RareEvent => return None,
            m => format!("{{\"kind\":\"{}\"}}", m.as_str()),
        };
        serde_json::from_str(&text).ok()
    }

    fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be finite and > 0, got {v}")))
            }
        };
        let at_least = |field: &str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be at least {min}, got {v}")))
            }
        };
        match self {
            MethodConfig::Mc { samples, ci_level } => {
                at_least("method.samples", *samples, 1)?;
                if !(*ci_level > 0.0 && *ci_level < 1.0) {
                    return Err(Error::config(
                        "method.ci_level",
                        format!("must lie in (0, 1), got {ci_level}"),
                    ));
                }
            }
            MethodConfig::Sla { .. } => {}
            MethodConfig::Panjer { step, max_loss, .. } => {
                positive("method.step", *step)?;
                if let Some(m) = max_loss {
                    positive("method.max_loss", *m)?;
                    if *m < *step {
                        return Err(Error::config("method.max_loss", "must be at least one step"));
                    }
                }
            }
            MethodConfig::Particle {
                particles,
                grid,
                interval,
                absorption,
                proposal,
                z_score,
                ..
            } => {
                at_least("method.particles", *particles, 1)?;
                if let Some(g) = grid {
                    g.points().map_err(|e| Error::config("method.grid", e.to_string()))?;
                }
                if let Some([lo, hi]) = interval {
                    if grid.is_some() {
                        return Err(Error::config("method.interval", "give either a grid or an interval"));
                    }
                    if !(*lo >= 0.0 && hi > lo && hi.is_finite()) {
                        return Err(Error::config(
                            "method.interval",
                            format!("need 0 <= lo < hi, got [{lo}, {hi}]"),
                        ));
                    }
                }
                if let Some(p) = absorption {
                    if !(*p > 0.0 && *p <= 1.0) {
                        return Err(Error::config(
                            "method.absorption",
                            format!("must lie in (0, 1], got {p}"),
                        ));
                    }
                }
                if let Proposal::Beta { concentration } = proposal {
                    positive("method.proposal.concentration", *concentration)?;
                }
                positive("method.z_score", *z_score)?;
            }
            MethodConfig::RareEvent {
                thresholds,
                particles,
                rho,
                replicates,
                ..
            } => {
                if thresholds.is_empty() {
                    return Err(Error::config("method.thresholds", "need at least one threshold"));
                }
                if let Some(i) = thresholds.iter().position(|z| !z.is_finite()) {
                    return Err(Error::config(format!("method.thresholds[{i}]"), "must be finite"));
                }
                if let Some(i) = thresholds.windows(2).position(|w| !(w[1] > w[0])) {
                    return Err(Error::config(
                        format!("method.thresholds[{}]", i + 1),
                        "thresholds must increase strictly",
                    ));
                }
                at_least("method.particles", *particles, 2)?;
                at_least("method.replicates", *replicates, 1)?;
                if !(0.0..1.0).contains(rho) {
                    return Err(Error::config("method.rho", format!("must lie in [0, 1), got {rho}")));
                }
            }
        }
        Ok(())
    }
}

/// A fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: CompoundModel,
    pub method: MethodConfig,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputFormat,
    #[serde(default)]
    pub spectral: Option<SpectralWeight>,
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<document>".to_string() } else { path };
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        if self.levels.is_empty() {
            return Err(Error::config("levels", "need at least one level"));
        }
        for (i, &a) in self.levels.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::config(
                    format!("levels[{i}]"),
                    format!("must lie in (0, 1), got {a}"),
                ));
            }
            if i > 0 && !(a > self.levels[i - 1]) {
                return Err(Error::config(format!("levels[{i}]"), "levels must increase strictly"));
            }
        }
        if let Some(s) = &self.spectral {
            s.validate()?;
        }
        self.method.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mc,
    Sla,
    Panjer,
    Particle,
    RareEvent,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Sla => "sla",
            Method::Panjer => "panjer",
            Method::Particle => "particle",
            Method::RareEvent => "rare-event",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            Method::Mc,
            Method::Sla,
            Method::Panjer,
            Method::Particle,
            Method::RareEvent,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }
}

/// One line of a report. Missing figures are `None` ("n/a" in CSV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub alpha: f64,
    pub method: Method,
    pub var: Option<f64>,
    pub var_lo: Option<f64>,
    pub var_hi: Option<f64>,
    pub es: Option<f64>,
    pub srm: Option<f64>,
    pub stderr: Option<f64>,
}

impl RiskRow {
    fn empty(alpha: f64, method: Method) -> Self {
        RiskRow {
            alpha,
            method,
            var: None,
            var_lo: None,
            var_hi: None,
            es: None,
            srm: None,
            stderr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: CompoundModel,
    pub model_hash: String,
    pub seed: u64,
    pub version: String,
    /// Wall-clock seconds; left empty unless requested so that reports stay
    /// byte-identical between runs.
    pub runtime: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub meta: ReportMeta,
    pub rows: Vec<RiskRow>,
}

impl RiskReport {
    fn new(model: &CompoundModel, seed: u64) -> Self {
        RiskReport {
            meta: ReportMeta {
                model: *model,
                model_hash: model.hash_hex(),
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                runtime: None,
            },
            rows: Vec::new(),
        }
    }

    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &RiskRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// VaR of `method` at level `alpha`, if the row exists and has one.
    pub fn var(&self, method: Method, alpha: f64) -> Option<f64> {
        self.rows_for(method).find(|r| r.alpha == alpha).and_then(|r| r.var)
    }

    /// Every float cut to six significant digits, as it appears once emitted.
    pub fn rounded(&self) -> Self {
        let r6 = |v: Option<f64>| v.map(round6);
        let mut out = self.clone();
        out.meta.runtime = r6(out.meta.runtime);
        for row in &mut out.rows {
            row.alpha = round6(row.alpha);
            row.var = r6(row.var);
            row.var_lo = r6(row.var_lo);
            row.var_hi = r6(row.var_hi);
            row.es = r6(row.es);
            row.srm = r6(row.srm);
            row.stderr = r6(row.stderr);
        }
        out
    }
}

/// `x` with six significant digits. Non-finite values print as `inf`, `-inf` or `nan`.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // let the formatter do the rounding, then read the exponent back
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-5..6).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{exp}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    s
}

fn round6(x: f64) -> f64 {
    format_sig6(x).parse().unwrap_or(x)
}

pub const CSV_HEADER: &str = "alpha,method,var,var_lo,var_hi,es,srm,stderr";

fn csv_cell(v: Option<f64>) -> String {
    v.map(format_sig6).unwrap_or_else(|| "n/a".into())
}

pub fn report_to_csv(report: &RiskReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            format_sig6(r.alpha),
            r.method.as_str(),
            csv_cell(r.var),
            csv_cell(r.var_lo),
            csv_cell(r.var_hi),
            csv_cell(r.es),
            csv_cell(r.srm),
            csv_cell(r.stderr),
        );
    }
    out
}

pub fn report_to_json(report: &RiskReport) -> String {
    let mut s = serde_json::to_string_pretty(&report.rounded()).expect("report serializes");
    s.push('\n');
    s
}

/// Serialized report in `format`.
pub fn render_report(report: &RiskReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => report_to_csv(report),
        OutputFormat::Json => report_to_json(report),
    }
}

/// Writes the report to `path`.
pub fn emit_report(report: &RiskReport, format: OutputFormat, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_report(report, format).as_bytes())?;
    Ok(())
}

pub fn parse_json_report(text: &str) -> Result<RiskReport> {
    serde_json::from_str(text).map_err(|e| Error::Io(format!("malformed report: {e}")))
}

/// Rows of a CSV report. CSV carries no metadata.
pub fn parse_csv_rows(text: &str) -> Result<Vec<RiskRow>> {
    let bad = |line: usize, what: &str| Error::Io(format!("malformed report line {line}: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let num = |s: &str, line: usize| -> Result<Option<f64>> {
        if s == "n/a" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line, s))
        }
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let line = i + 2;
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 8 {
                return Err(bad(line, "expected 8 columns"));
            }
            Ok(RiskRow {
                alpha: num(c[0], line)?.ok_or_else(|| bad(line, "alpha missing"))?,
                method: Method::parse(c[1]).ok_or_else(|| bad(line, c[1]))?,
                var: num(c[2], line)?,
                var_lo: num(c[3], line)?,
                var_hi: num(c[4], line)?,
                es: num(c[5], line)?,
                srm: num(c[6], line)?,
                stderr: num(c[7], line)?,
            })
        })
        .collect()
}

/// Runs the configured method at every level.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RiskReport> {
    cfg.validate()?;
    let mut report = RiskReport::new(&cfg.model, cfg.seed);
    let phi = cfg.spectral;
    report.rows = match &cfg.method {
        MethodConfig::Mc { samples, ci_level } => mc_rows(&cfg.model, &cfg.levels, *samples, *ci_level, cfg.seed, phi)?,
        MethodConfig::Sla { second_order } => sla_rows(&cfg.model, &cfg.levels, *second_order, phi)?,
        MethodConfig::Panjer {
            step,
            discretization,
            max_loss,
        } => {
            let pmf = panjer_oracle(&cfg.model, *step, *discretization, *max_loss, last(&cfg.levels))?;
            panjer_rows(&pmf, &cfg.levels, phi)?
        }
        MethodConfig::Particle {
            particles,
            grid,
            interval,
            absorption,
            proposal,
            score,
            variance_reduction,
            z_score,
        } => {
            let mut pcfg = PathSamplerConfig::pointwise(&cfg.model, 1.0, *particles);
            pcfg.absorption = absorption.unwrap_or_else(|| default_absorption(&cfg.model));
            pcfg.proposal = *proposal;
            pcfg.score = *score;
            pcfg.variance_reduction = *variance_reduction;
            let measure = match interval {
                Some([lo, hi]) => estimate_measure_interval(&cfg.model, *lo, *hi, &pcfg, cfg.seed)?,
                None => {
                    let grid = match grid {
                        Some(g) => g.clone(),
                        None => default_grid(&cfg.model, last(&cfg.levels)),
                    };
                    estimate_density_grid(&cfg.model, &grid.points()?, &pcfg, cfg.seed)?
                }
            };
            particle_rows(&measure, &cfg.levels, *z_score, phi)?
        }
        MethodConfig::RareEvent {
            thresholds,
            particles,
            mh_steps,
            rho,
            replicates,
            resampling,
        } => {
            let smc = SmcConfig {
                particles: *particles,
                mh_steps: *mh_steps,
                resampling: *resampling,
                ..SmcConfig::default()
            };
            rare_event_rows(&cfg.model, thresholds, *rho, &smc, *replicates, cfg.seed)?
        }
    };
    Ok(report)
}

fn last(levels: &[f64]) -> f64 {
    levels.iter().copied().fold(0.5, f64::max)
}

fn z_for(level: f64) -> f64 {
    normal_quantile(0.5 + 0.5 * level)
}

fn mc_rows(
    model: &CompoundModel,
    levels: &[f64],
    samples: usize,
    ci_level: f64,
    seed: u64,
    phi: Option<SpectralWeight>,
) -> Result<Vec<RiskRow>> {
    let sorted = model.simulate(samples, seed)?.sorted()?;
    let v = sorted.values();
    let n = v.len() as f64;
    let z = z_for(ci_level);
    let srm = phi.map(|w| {
        v.iter()
            .enumerate()
            .map(|(i, x)| x * w.eval((i + 1) as f64 / n))
            .sum::<f64>()
            / n
    });
    levels
        .iter()
        .map(|&alpha| {
            let ci = sorted.quantile_ci(alpha, ci_level)?;
            let start = v.partition_point(|&x| x < ci.point);
            let tail = &v[start..];
            let es = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
            Ok(RiskRow {
                var: Some(ci.point),
                var_lo: Some(ci.lower),
                var_hi: Some(ci.upper),
                es,
                srm,
                stderr: Some((ci.upper - ci.lower) / (2.0 * z)),
                ..RiskRow::empty(alpha, Method::Mc)
            })
        })
        .collect()
}

/// Tolerates the errors that only say a figure does not exist for this model.
fn optional<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UnsupportedModel(_) | Error::Domain(_) | Error::DegenerateCorrection { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn sla_rows(
    model: &CompoundModel,
    levels: &[f64],
    second_order: bool,
    phi: Option<SpectralWeight>,
) -> Result<Vec<RiskRow>> {
    levels
        .iter()
        .map(|&alpha| {
            let var = if second_order {
                let r = sla_var_second_order(model, alpha)?;
                r.var_second.unwrap_or(r.var_first)
            } else {
                sla_var_first_order(model, alpha)?
            };
            let w = phi.unwrap_or(SpectralWeight::Expectation);
            let tail = optional(sla_es_srm(model, alpha, |u| w.eval(u)))?;
            Ok(RiskRow {
                var: Some(var),
                es: tail.map(|t| t.0),
                srm: phi.and(tail.map(|t| t.1)),
                ..RiskRow::empty(alpha, Method::Sla)
            })
        })
        .collect()
}

/// Compound pmf on a lattice of step `step`, long enough to reach `top_level`.
pub fn panjer_oracle(
    model: &CompoundModel,
    step: f64,
    method: Discretization,
    max_loss: Option<f64>,
    top_level: f64,
) -> Result<CompoundPmf> {
    let build = |end: f64| -> Result<CompoundPmf> {
        let cells = (end / step).ceil() as usize;
        let sev = discretize_severity(&model.severity, step, cells, method)?;
        let pmf = match model.frequency {
            FrequencyModel::GeneralizedPoisson { lambda, theta } => gpd_panjer_discrete(lambda, theta, &sev, cells)?,
            f => panjer_discrete(&f.panjer_params()?, &sev, cells)?,
        };
        Ok(pmf.with_hash(model.hash_hex()))
    };
    if let Some(end) = max_loss {
        return build(end);
    }
    let mut end = 20.0 * model.mean().max(step);
    for _ in 0..12 {
        let pmf = build(end)?;
        // margin so the tail beyond the lattice cannot move the top quantile
        if pmf.total_mass() >= 1.0 - 0.01 * (1.0 - top_level) {
            return Ok(pmf);
        }
        end *= 2.0;
    }
    build(end)
}

fn panjer_rows(pmf: &CompoundPmf, levels: &[f64], phi: Option<SpectralWeight>) -> Result<Vec<RiskRow>> {
    let srm = phi.map(|w| {
        let total = pmf.total_mass();
        let mut p = 0.0;
        let mut s = 0.0;
        for (k, g) in pmf.masses.iter().enumerate() {
            p += g / total;
            s += k as f64 * pmf.step * w.eval(p.min(1.0)) * g / total;
        }
        s
    });
    levels
        .iter()
        .map(|&alpha| {
            let var = pmf.quantile(alpha)?;
            Ok(RiskRow {
                var: Some(var),
                es: Some(pmf.tail_mean(var)?),
                srm,
                ..RiskRow::empty(alpha, Method::Panjer)
            })
        })
        .collect()
}

/// Width-1 grid reaching three times the first-order SLA at `top_level`.
pub fn default_grid(model: &CompoundModel, top_level: f64) -> GridSpec {
    let sla = sla_var_first_order(model, top_level).unwrap_or(0.0);
    let end = (3.0 * sla).max(20.0 * model.mean()).max(10.0).ceil();
    GridSpec::Linear { width: 1.0, end }
}

fn particle_rows(
    measure: &WeightedParticleMeasure,
    levels: &[f64],
    z: f64,
    phi: Option<SpectralWeight>,
) -> Result<Vec<RiskRow>> {
    let w = phi.unwrap_or(SpectralWeight::Expectation);
    levels
        .iter()
        .map(|&alpha| {
            let mut row = RiskRow::empty(alpha, Method::Particle);
            let q = match measure.quantile_ci(alpha, z) {
                Ok(q) => q,
                // the estimated mass never reaches α on this support
                Err(Error::Truncation { .. }) => return Ok(row),
                Err(e) => return Err(e),
            };
            row.var = Some(q.point);
            row.var_lo = Some(q.lower);
            row.var_hi = q.upper.is_finite().then_some(q.upper);
            row.stderr = row.var_hi.map(|hi| (hi - q.lower) / (2.0 * z));
            if let Some(r) = optional(measure.risk_measures(alpha, &|u| w.eval(u))).or_else(|e| {
                if matches!(e, Error::EmptyTail { .. }) {
                    Ok(None)
                } else {
                    Err(e)
                }
            })? {
                row.es = Some(r.es);
                row.srm = phi.map(|_| r.srm);
            }
            Ok(row)
        })
        .collect()
}

fn rare_event_rows(
    model: &CompoundModel,
    thresholds: &[f64],
    rho: f64,
    smc: &SmcConfig,
    replicates: usize,
    seed: u64,
) -> Result<Vec<RiskRow>> {
    let target = CompoundTail::new(*model, rho)?;
    let levels = LevelSequence::fixed(thresholds.to_vec());
    // per replicate, the running products estimate P(Z > z_k) at every rung
    let mut per_level = vec![Vec::with_capacity(replicates); thresholds.len()];
    for r in 0..replicates {
        let est = smc_rare_event(&target, &levels, smc, replicate_seed(seed, r))?;
        let mut p = 1.0;
        for (k, bucket) in per_level.iter_mut().enumerate() {
            p *= est.fractions.get(k).copied().unwrap_or(0.0);
            bucket.push(p);
        }
    }
    Ok(thresholds
        .iter()
        .zip(per_level)
        .map(|(&z, values)| {
            let s = ReplicateSummary::from_values(values);
            RiskRow {
                var: Some(z),
                stderr: (replicates > 1).then_some(s.stderr),
                ..RiskRow::empty(1.0 - s.mean, Method::RareEvent)
            }
        })
        .collect())
}

/// Example 2 settings: Poisson(2) counts with LogNormal(2, σ) losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Table1Preset {
    Sigma05,
    Sigma1,
}

impl Table1Preset {
    pub fn model(&self) -> CompoundModel {
        let sigma = match self {
            Table1Preset::Sigma05 => 0.5,
            Table1Preset::Sigma1 => 1.0,
        };
        CompoundModel::poisson_lognormal(2.0, 2.0, sigma).expect("preset parameters are valid")
    }
}

pub const TABLE1_MC_SAMPLES: f64 = 5e7;
pub const TABLE1_PARTICLES: f64 = 5e4;

/// MC, particle grid and first-order SLA columns at the default levels,
/// with budgets `scale` times the reference ones.
pub fn reproduce_table1(preset: Table1Preset, scale: f64, seed: u64) -> Result<RiskReport> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::config("scale", format!("must lie in (0, 1], got {scale}")));
    }
    let model = preset.model();
    let levels = default_levels();
    let samples = (TABLE1_MC_SAMPLES * scale).round().max(1.0) as usize;
    let particles = (TABLE1_PARTICLES * scale).round().max(1.0) as usize;
    let base = ExperimentConfig {
        model,
        method: MethodConfig::Sla { second_order: false },
        levels: levels.clone(),
        seed,
        output: OutputFormat::Csv,
        spectral: None,
    };
    let mut report = RiskReport::new(&model, seed);
    for method in [
        MethodConfig::Mc {
            samples,
            ci_level: defaults::ci_level(),
        },
        MethodConfig::Particle {
            particles,
            grid: Some(default_grid(&model, last(&levels))),
            interval: None,
            absorption: None,
            proposal: Proposal::default(),
            score: Score::default(),
            variance_reduction: true,
            z_score: defaults::z_score(),
        },
        MethodConfig::Sla { second_order: false },
    ] {
        let cfg = ExperimentConfig { method, ..base.clone() };
        report.rows.extend(run_experiment(&cfg)?.rows);
    }
    Ok(report)
}
