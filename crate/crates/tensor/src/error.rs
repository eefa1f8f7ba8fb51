use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: argument out of domain at index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("label {label} at point {index} is outside 0..{classes}")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("batch norm in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("parameter gradients were not zeroed since the last backward pass")]
    StaleGradients,

    #[error("non-finite gradient in parameter `{param}` at index {index}")]
    NonFinite { param: String, index: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}
