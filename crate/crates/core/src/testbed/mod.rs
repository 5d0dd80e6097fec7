//! In-process numerical testbed: a staged MLP trained with micro-batched
//! backpropagation whose inter-stage traffic can be compressed.
//!
//! Activations are laid out with one token per row, so a micro-batch of `n`
//! sequences of length `L` is an `(n·L) × d` matrix, and that is what the
//! low-rank compressor sees on each boundary.

mod conditions;
mod data;
mod embedding;
mod model;
mod report;
mod train;
mod verify;

pub use conditions::{measure_conditions, measure_conditions_over, BoundaryConditions};
pub use data::{Microbatch, Minibatch, TeacherTask};
pub use embedding::{fused_average, fused_embedding_check, sequential_average, EmbeddingGrads, TiedEmbeddingModel};
pub use model::{orthogonal_init, standardize_columns, Activation, ForwardCache, Loss, StagedMlp};
pub use report::{convergence_compare, iteration_csv, write_iteration_csv, Curve, IterationRow};
pub use train::{BoundaryTrace, IterationRecord, LinkSelection, Mode, Trainer, TrainerSettings};
pub use verify::{measurement_iterations, verify, Check, ForwardOutcome, VerifyReport};

use serde::{Deserialize, Serialize};

use crate::compress::{lowrank_ratio, Warmup};
use crate::error::{Error, Result};

/// Sizes and training knobs of a testbed experiment. Keys left out of a JSON
/// section take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedConfig {
    /// Layers `K`.
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Pipeline stages `S`.
    pub stages: usize,
    /// Micro-batches per iteration `M`.
    pub microbatches: usize,
    /// Samples per micro-batch `n`.
    pub microbatch_size: usize,
    /// Token rows per sample.
    pub seq_len: usize,
    /// Scale of the per-token part of the input relative to the shared
    /// per-position pattern.
    pub token_noise: f64,
    pub seed: u64,
    /// Rank for inter-stage backward traffic.
    pub rank_cb: usize,
    /// Rank for data-parallel gradients.
    pub rank_dp: usize,
    pub warmup_iterations: u64,
    /// Iteration budget for convergence runs.
    pub iterations: usize,
    pub learning_rate: f64,
    pub activation: Activation,
    pub loss: Loss,
    pub normalize_input: bool,
}

fn default_seq_len() -> usize {
    16
}

fn default_token_noise() -> f64 {
    0.25
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            input_dim: 64,
            hidden_dim: 64,
            output_dim: 64,
            stages: 4,
            microbatches: 64,
            microbatch_size: 8,
            seq_len: default_seq_len(),
            token_noise: default_token_noise(),
            seed: 7,
            rank_cb: 4,
            rank_dp: 4,
            warmup_iterations: Warmup::default().iterations,
            iterations: 30,
            learning_rate: 0.01,
            activation: Activation::Identity,
            loss: Loss::Mse,
            normalize_input: true,
        }
    }
}

impl TestbedConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
            ("stages", self.stages),
            ("microbatches", self.microbatches),
            ("microbatch_size", self.microbatch_size),
            ("seq_len", self.seq_len),
            ("rank_cb", self.rank_cb),
            ("rank_dp", self.rank_dp),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("testbed.{name} must be positive")));
        }
        if self.stages > self.layers {
            return Err(Error::InvalidArgument(format!(
                "testbed.stages ({}) exceeds testbed.layers ({})",
                self.stages, self.layers
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("testbed.learning_rate must be positive".into()));
        }
        if !(self.token_noise.is_finite() && self.token_noise >= 0.0) {
            return Err(Error::InvalidArgument(
                "testbed.token_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `input → hidden × (K−1) → output`
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(std::iter::repeat_n(self.hidden_dim, self.layers - 1));
        d.push(self.output_dim);
        d
    }

    pub fn model(&self) -> Result<StagedMlp> {
        self.validate()?;
        let mut m = StagedMlp::new(&self.dims(), self.stages, self.seed)?;
        m.learning_rate = self.learning_rate;
        m.activation = self.activation;
        m.loss = self.loss;
        m.normalize_input = self.normalize_input;
        Ok(m)
    }

    pub fn task(&self) -> TeacherTask {
        let mut t = TeacherTask::new(
            self.input_dim,
            self.output_dim,
            self.seq_len,
            self.loss,
            self.seed ^ 0xda7a,
        )
        .with_positional(self.token_noise);
        t.normalize = self.normalize_input;
        t
    }

    pub fn settings(&self) -> TrainerSettings {
        TrainerSettings {
            warmup: Warmup {
                iterations: self.warmup_iterations,
            },
            seed: self.seed,
            ..TrainerSettings::new(self.rank_cb)
        }
    }

    pub fn trainer(&self, mode: Mode) -> Result<Trainer> {
        Trainer::new(self.model()?, mode, self.settings())
    }

    /// Mini-batch for iteration `index`.
    pub fn minibatch(&self, index: u64) -> Result<Minibatch> {
        self.task().minibatch(index, self.microbatches, self.microbatch_size)
    }

    /// Compression ratio on an inter-stage activation gradient.
    pub fn boundary_compression(&self) -> f64 {
        lowrank_ratio(self.microbatch_size * self.seq_len, self.hidden_dim, self.rank_cb)
    }
}
