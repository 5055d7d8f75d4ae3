use std::io;

/// Errors raised by the engine, the flows, the objectives and the data loaders.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite gradient of the log-joint at a point with |phi| = {norm}")]
    NonFiniteGradient { norm: f64 },

    #[error("flow step {step}: {source}")]
    FlowStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training step {step}: {source}")]
    TrainStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteParameterGradient { name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("IDX format error: {0}")]
    Format(String),

    #[error("IDX payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
