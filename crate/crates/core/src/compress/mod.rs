//! Gradient compressors: low-rank power iteration with factor reuse, top-k,
//! and the residual buffers that make them unbiased over time.

mod feedback;
mod lowrank;
mod topk;
pub mod wire;

pub use feedback::{ef_step, lazy_step, ErrorFeedbackBuffer, LazyErrorBuffer};
pub use lowrank::{lowrank_compress, lowrank_decompress, lowrank_ratio, LowRankPayload, LowRankState};
pub use topk::{topk_compress, topk_decompress, TopKPayload};

use serde::{Deserialize, Serialize};

/// Element accounting shared by all payloads.
pub trait Payload {
    /// Entries in the uncompressed matrix.
    fn original_len(&self) -> usize;
    /// Numbers actually transmitted.
    fn payload_len(&self) -> usize;

    fn compression_ratio(&self) -> f64 {
        self.original_len() as f64 / self.payload_len() as f64
    }
}

pub fn compression_ratio(payload: &impl Payload) -> f64 {
    payload.compression_ratio()
}

/// Number of initial iterations that run uncompressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warmup {
    pub iterations: u64,
}

impl Default for Warmup {
    fn default() -> Self {
        Self { iterations: 10 }
    }
}

impl Warmup {
    pub fn compress_enabled(&self, iteration: u64) -> bool {
        iteration >= self.iterations
    }
}
