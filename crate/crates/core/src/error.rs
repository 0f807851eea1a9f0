use thiserror::Error;

use crate::flow::Trajectory;
use crate::greedy::GreedyReport;

pub type Result<T, E = DlnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DlnError {
    #[error("malformed parameters: {0}")]
    MalformedParams(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A parameter or loss became NaN/Inf; the step size is likely too large.
    #[error("non-finite state at step {step} (t = {time})")]
    NonFinite {
        step: usize,
        time: f64,
        partial: Box<Trajectory>,
    },

    #[error("norm never reached radius {radius} within {steps} steps")]
    NeverEscaped {
        radius: f64,
        steps: usize,
        partial: Box<Trajectory>,
    },

    #[error("top singular value is not simple (s1 = {s1}, s2 = {s2})")]
    MultiplicityNotOne { s1: f64, s2: f64 },

    #[error("hidden width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("network is not rectangular: widths {0:?}")]
    NotRectangular(Vec<usize>),

    #[error("escape-path tail not negligible: {tail:e} > {bound:e} at t_min = {t_min}")]
    TailNotNegligible { tail: f64, bound: f64, t_min: f64 },

    #[error("fixed-point map is not contracting (ratios {0:?})")]
    NoContraction(Vec<f64>),

    #[error("greedy widening reached max width {}", .0.final_width())]
    MaxWidthExceeded(Box<GreedyReport>),

    #[error("cost has no finite minimum")]
    NoFiniteMinimum,

    #[error("{0}")]
    Domain(String),
}

impl DlnError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        DlnError::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DlnError::InvalidArgument(msg.into())
    }
}
