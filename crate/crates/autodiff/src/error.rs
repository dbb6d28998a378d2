use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{name}` at element {index}: {value}")]
    NonFiniteGradient {
        name: String,
        index: usize,
        value: f64,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn domain_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Domain {
        op,
        detail: detail.into(),
    }
}
