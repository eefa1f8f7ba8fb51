use std::path::PathBuf;

use dafss_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scene needs up to {required} points but max_points is {max}")]
    Capacity { required: usize, max: usize },

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("support mask for way {way} is empty")]
    DegenerateSupport { way: usize },

    #[error("unknown {table} id {id} (table has {len} entries)")]
    Lookup {
        table: &'static str,
        id: usize,
        len: usize,
    },

    #[error("prototype counts differ: {left} vs {right}")]
    Pairing { left: usize, right: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{what} {value} out of range for {classes} classes at position {index}")]
    Index {
        what: &'static str,
        index: usize,
        value: usize,
        classes: usize,
    },

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: usize, components: String },

    #[error("gradient monitor: {0}")]
    Monitor(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cell {mode}/seed {seed} failed: {source}")]
    Cell {
        mode: String,
        seed: u64,
        #[source]
        source: Box<CoreError>,
    },
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
