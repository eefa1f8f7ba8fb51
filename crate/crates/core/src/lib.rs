//! Decoupled-experts few-shot segmentation of synthetic point clouds.
//!
//! Pipeline: [`scene`] generates rooms, [`episode`] draws N-way K-shot
//! tasks, [`features`] turns points into prototype correlations, the
//! [`experts`] refine each correlation map on its own, [`dam`] aligns the two
//! pathways during training, [`sam`] arbitrates and decodes, and [`trainer`],
//! [`eval`] and [`experiment`] drive the whole thing.

pub mod checkpoint;
pub mod config;
pub mod dam;
pub mod episode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod experts;
pub mod features;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod sam;
pub mod scene;
pub mod trainer;

pub use error::{CoreError, Result};
