//! Residual-carrying wrappers around the low-rank compressor.
//!
//! Both buffers keep `input − reconstruction` of the last compressed send and
//! add it to the next input. [`LazyErrorBuffer`] lives on an inter-stage
//! backward link and is stepped once per micro-batch; [`ErrorFeedbackBuffer`]
//! carries data-parallel residuals from one iteration to the next.

use serde::{Deserialize, Serialize};

use super::lowrank::{lowrank_compress, lowrank_decompress, LowRankPayload, LowRankState};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LazyErrorBuffer {
    residual: Matrix,
    sends: u64,
}

impl LazyErrorBuffer {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            residual: Matrix::zeros(rows, cols),
            sends: 0,
        }
    }

    pub fn residual(&self) -> &Matrix {
        &self.residual
    }

    /// Compressed sends made through this buffer so far.
    pub fn sends(&self) -> u64 {
        self.sends
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFeedbackBuffer {
    residual: Matrix,
    iteration: u64,
}

impl ErrorFeedbackBuffer {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            residual: Matrix::zeros(rows, cols),
            iteration: 0,
        }
    }

    pub fn residual(&self) -> &Matrix {
        &self.residual
    }

    /// Number of iterations whose residual has been folded in.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }
}

fn compensated_step(
    grad: &Matrix,
    residual: &mut Matrix,
    state: &mut LowRankState,
    op: &'static str,
) -> Result<LowRankPayload> {
    if grad.shape() != residual.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: grad.shape(),
            right: residual.shape(),
        });
    }
    let input = grad.add(residual)?;
    let payload = lowrank_compress(&input, state)?;
    *residual = input.sub(&lowrank_decompress(&payload)?)?;
    Ok(payload)
}

/// Compresses `grad + ε` and stores the new residual in `buf`.
pub fn lazy_step(grad: &Matrix, buf: &mut LazyErrorBuffer, state: &mut LowRankState) -> Result<LowRankPayload> {
    let payload = compensated_step(grad, &mut buf.residual, state, "lazy_step")?;
    buf.sends += 1;
    Ok(payload)
}

/// Iteration-level error feedback for data-parallel gradients.
pub fn ef_step(grad: &Matrix, buf: &mut ErrorFeedbackBuffer, state: &mut LowRankState) -> Result<LowRankPayload> {
    let payload = compensated_step(grad, &mut buf.residual, state, "ef_step")?;
    buf.iteration += 1;
    Ok(payload)
}
