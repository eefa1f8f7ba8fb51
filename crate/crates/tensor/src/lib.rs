//! Minimal dense-tensor library with tape-based reverse-mode
//! differentiation, a stop-gradient operator and an AdamW optimizer.
//!
//! Everything is `f64` and row-major. A forward pass records onto a
//! [`Graph`]; trainable weights live in a [`ParamStore`] and are entered
//! into each new graph with [`Graph::param`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{sigmoid, BatchStats, BnMode, Graph, RunningStats, Var, NORM_EPS};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use params::{GradMap, Param, ParamId, ParamStore};
pub use tensor::Tensor;
