use thiserror::Error;

#[derive(Debug, Error)]
pub enum BpError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: bad argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("sparse map has no valid pixels")]
    EmptySparseMap,
    #[error("requested {requested} points but only {available} positive pixels available")]
    InsufficientPoints { requested: usize, available: usize },
    #[error("extents {h}x{w} not divisible by {m}")]
    Indivisible { h: usize, w: usize, m: usize },
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, BpError>;
