use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("gradients already populated; call zero_grad() before another backward pass")]
    GradientsNotReset,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Argument {
        op,
        detail: detail.into(),
    }
}
