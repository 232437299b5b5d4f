use alloc::boxed::Box;
use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("state {state} lies in a closed class that keeps collecting reward; undiscounted values diverge")]
    RecurrentReward { state: usize },
    #[error("no convergence after {iterations} iterations (remaining tail mass {tail:e})")]
    NoConvergence { iterations: usize, tail: f64 },
    #[error("behavior policy has empty support")]
    EmptySupport,
    #[error("target occupancy is positive on state {state} which the behavior policy never visits")]
    CoverageViolation { state: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("epsilon smoothing needs an absorbing-state sentinel but the state encoding has no room for one")]
    MissingSentinel,
    #[error("importance weight normalizer {value:e} is degenerate; the estimate is unreliable")]
    DegenerateNormalizer { value: f64 },
    #[error("correlation is undefined for zero-variance inputs")]
    UndefinedCorrelation,
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("stage `{stage}` failed at actor update {update}: {source}")]
    Stage {
        stage: &'static str,
        update: usize,
        source: Box<Error>,
    },
    #[error("checkpoint sink: {0}")]
    Sink(String),
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str, update: usize) -> Error {
        Error::Stage {
            stage,
            update,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the numbers rather than the inputs'
    /// structure (non-finite values, divergence, degenerate normalizers).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::NoConvergence { .. }
            | Error::DegenerateNormalizer { .. }
            | Error::UndefinedCorrelation
            | Error::RecurrentReward { .. } => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], context: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}
