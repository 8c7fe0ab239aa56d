use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("uniform stream exhausted after {consumed} draws")]
    StreamExhausted { consumed: usize },

    #[error("level out of range: (1 - alpha) / E[N] = {ratio} must lie in (0, 1)")]
    LevelOutOfRange { ratio: f64 },

    #[error("second-order correction factor {factor} is not positive; use the first-order value")]
    DegenerateCorrection { factor: f64 },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("quadrature did not converge: achieved error {achieved:e}, requested {requested:e}")]
    NonConvergence { achieved: f64, requested: f64 },

    #[error("Panjer recursion unstable: 1 - a*f0 = {denominator}")]
    Instability { denominator: f64 },

    #[error("truncated mass {accumulated} is below the requested level {requested}; enlarge the support")]
    Truncation { accumulated: f64, requested: f64 },

    #[error("empty sample")]
    EmptySample,

    #[error("proposal produced {proposed} which is not in (0, {current})")]
    ProposalSupport { current: f64, proposed: f64 },

    #[error("proposal density vanishes at ({from}, {to}) where the kernel does not")]
    SupportViolation { from: f64, to: f64 },

    #[error("particle system extinct at level {level}")]
    Extinction { level: usize },

    #[error("target is not invariant for the transition (residual {residual:e})")]
    InvalidTarget { residual: f64 },

    #[error("importance ratio is not finite at a sampled point {at}")]
    DominationViolation { at: f64 },

    #[error("no atoms at or above the level {var}")]
    EmptyTail { var: f64 },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::StreamExhausted { .. } => "stream_exhausted",
            Error::LevelOutOfRange { .. } => "level_out_of_range",
            Error::DegenerateCorrection { .. } => "degenerate_correction",
            Error::UnsupportedModel(_) => "unsupported_model",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Instability { .. } => "instability",
            Error::Truncation { .. } => "truncation",
            Error::EmptySample => "empty_sample",
            Error::ProposalSupport { .. } => "proposal_support",
            Error::SupportViolation { .. } => "support_violation",
            Error::Extinction { .. } => "extinction",
            Error::InvalidTarget { .. } => "invalid_target",
            Error::DominationViolation { .. } => "domination_violation",
            Error::EmptyTail { .. } => "empty_tail",
            Error::Config { .. } => "config",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
