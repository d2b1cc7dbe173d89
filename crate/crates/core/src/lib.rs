//! Forecast-blur-denoise modelling library.
//!
//! Provides the pieces the `blurcast` binary is assembled from: a dense f64
//! tensor type with reverse-mode autodiff, a GP-based blur model with a
//! sparse variational evidence bound, a small encoder-decoder forecaster,
//! training/evaluation pipelines for the treatment variants, and experiment
//! orchestration (configs, checkpoints, report aggregation).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod forecaster;
pub mod gp_blur;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
