use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not require a gradient")]
    Detached(usize),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
}

pub type Result<T> = std::result::Result<T, NumError>;
