//! A laboratory for the stability gap in joint incremental training.
//!
//! Small networks are trained with momentum SGD on task-split data while the
//! training loop is instrumented at iteration and mini-batch granularity.
//! Gap metrics are extracted from the resulting traces, and the loss along
//! the linear path between checkpoints is compared with the loss along the
//! recorded SGD trajectory.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod experiment;
pub mod instrument;
pub mod loss;
pub mod model;
pub mod numfmt;
pub mod report;
pub mod rng;
pub mod svg;
pub mod tensor;
pub mod trainer;

pub use error::{GapError, Result};
