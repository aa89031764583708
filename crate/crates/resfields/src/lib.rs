//! Temporal neural fields with residual weight layers: dense numerics,
//! hand-rolled reverse-mode kernels, time-conditioned weight factorizations,
//! desk-scale tasks (video, signed distance, scene flow), geometry metrics,
//! and a reproducible training/eval CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod resfield;
pub mod runner;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
pub use linalg::Tensor;
