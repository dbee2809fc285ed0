use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output size is not exact: ({extent} + 2*{pad} - {kernel}) is not divisible by stride {stride}")]
    InexactOutput {
        op: &'static str,
        extent: usize,
        pad: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("{op}: key sequence is empty")]
    EmptySequence { op: &'static str },

    #[error("{op}: {groups} groups do not divide {channels} channels")]
    Groups {
        op: &'static str,
        groups: usize,
        channels: usize,
    },

    #[error("{op}: index {index} out of range for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}
