//! Communication-compression toolkit for pipeline-parallel training.
//!
//! * [`matrix`]: dense kernels (matmul, Gram–Schmidt, cosine similarity).
//! * [`compress`]: low-rank and top-k compressors with lazy / iteration-level
//!   residual buffers.
//! * [`pipesim`]: deterministic 1F1B schedule simulator with communication
//!   cost models, critical-path and epilogue analysis, selective stage
//!   compression and exposed-time breakdowns.
//! * [`testbed`]: staged MLP trained with compressed backpropagation, used to
//!   check gradient fidelity and the conditions under which lazily propagated
//!   errors cancel.
//! * [`config`]: JSON experiment configuration.

pub mod compress;
pub mod config;
pub mod error;
pub mod matrix;
pub mod pipesim;
pub mod testbed;

pub use error::{Error, Result};
pub use matrix::Matrix;
