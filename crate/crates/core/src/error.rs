use alloc::boxed::Box;
use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("operation is undefined when no power flows")]
    NoFlow,

    #[error("infeasible scenario: demand {demand} kW exceeds capacity {capacity} kW")]
    Infeasible { demand: f64, capacity: f64 },

    #[error("oracle did not converge within {iterations} iterations (residual {residual:e})")]
    OracleFailure { iterations: usize, residual: f64 },

    #[error("active-set iteration cycled on {n} VPPs and enumeration is capped at {cap}")]
    ActiveSetCycle { n: usize, cap: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("consensus diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),

    #[error("data too short: need {needed} samples, got {got}")]
    DataTooShort { needed: usize, got: usize },

    #[error("training diverged in epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("window length mismatch: expected {expected}, got {got}")]
    WindowLength { expected: usize, got: usize },

    #[error("time series are not aligned")]
    Misaligned,

    #[error("series does not cover the requested span: {0}")]
    SpanTooShort(String),

    #[error("cannot select {requested} participants from a pool of {pool}")]
    Participants { requested: usize, pool: usize },

    #[error("missing interval {0}")]
    MissingInterval(usize),

    #[error("round {round}, building {building}: {source}")]
    Client {
        round: usize,
        building: String,
        source: Box<Error>,
    },

    #[error("interval {interval}: {source}")]
    Interval { interval: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Strips round/interval context and returns the innermost error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Client { source, .. } | Error::Interval { source, .. } => source.root(),
            other => other,
        }
    }
}
