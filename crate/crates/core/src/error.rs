// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::kinetics::RateConstants;

/// Errors produced anywhere in the kinetics / simulation / estimation chain.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A value violates a type invariant or an operation precondition.
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    /// The rate generator has no unique stationary state.
    #[error("degenerate rate system: {0}")]
    Degenerate(String),

    /// The requested derived quantities are not reachable from any valid rate tuple.
    #[error("no physical rate solution: {0}")]
    NoSolution(String),

    /// Several physical rate tuples reproduce the inputs equally well.
    #[error("ambiguous inversion: {} candidate rate sets", candidates.len())]
    Ambiguous { candidates: Vec<RateConstants> },

    /// A power lies outside the model's validity range or drives a rate negative.
    #[error("power {power_mw} mW out of range: {reason}")]
    PowerOutOfRange { power_mw: f64, reason: String },

    #[error("events are not sorted by timestamp (index {index})")]
    Unsorted { index: usize },

    /// Expected simulated event count exceeds the configured budget.
    #[error("expected {expected:.3e} events exceeds the budget of {budget}")]
    EventBudget { expected: f64, budget: u64 },

    /// Curve carries no information about the kinetic parameters.
    #[error("unidentifiable curve: {0}")]
    Unidentifiable(String),

    #[error("fit did not converge after {iterations} iterations: {reason}")]
    NotConverged { iterations: usize, reason: String },

    #[error("eta calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("regression is rank deficient: {0}")]
    RankDeficient(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// A multi-stage run failed; `source` is the stage's own error.
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    /// The innermost error, unwrapping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
