use thiserror::Error;

/// Errors raised by tensor construction, kernels, and the autodiff engine.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite values in {what}")]
    NonFinite { op: &'static str, what: &'static str },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("{op}: invalid argument, {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
