use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{standardize_columns, Loss};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One micro-batch: `n·seq_len` token rows of input and matching targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Microbatch {
    pub input: Matrix,
    pub target: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minibatch {
    pub microbatches: Vec<Microbatch>,
    /// Samples per micro-batch.
    pub samples: usize,
    /// Token rows per sample.
    pub seq_len: usize,
}

impl Minibatch {
    pub fn new(microbatches: Vec<Microbatch>, samples: usize, seq_len: usize) -> Result<Self> {
        let rows = samples * seq_len;
        let first = microbatches
            .first()
            .ok_or_else(|| Error::InvalidArgument("mini-batch has no micro-batches".into()))?;
        let (din, dout) = (first.input.cols(), first.target.cols());
        for mb in &microbatches {
            if mb.input.shape() != (rows, din) || mb.target.shape() != (rows, dout) {
                return Err(Error::ShapeMismatch {
                    op: "minibatch",
                    left: mb.input.shape(),
                    right: (rows, din),
                });
            }
        }
        Ok(Self {
            microbatches,
            samples,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.microbatches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.microbatches.is_empty()
    }

    /// Total samples `N = M·n`.
    pub fn total_samples(&self) -> usize {
        self.len() * self.samples
    }

    pub fn total_rows(&self) -> usize {
        self.total_samples() * self.seq_len
    }

    /// Same rows regrouped into micro-batches of `samples` each.
    pub fn resplit(&self, samples: usize) -> Result<Self> {
        if samples == 0 || !self.total_samples().is_multiple_of(samples) {
            return Err(Error::InvalidArgument(format!(
                "{} samples do not split into groups of {samples}",
                self.total_samples()
            )));
        }
        let input = Matrix::vstack(&self.microbatches.iter().map(|m| m.input.clone()).collect::<Vec<_>>())?;
        let target = Matrix::vstack(&self.microbatches.iter().map(|m| m.target.clone()).collect::<Vec<_>>())?;
        let rows = samples * self.seq_len;
        let parts = (0..self.total_samples() / samples)
            .map(|j| Microbatch {
                input: input.row_slice(j * rows, (j + 1) * rows),
                target: target.row_slice(j * rows, (j + 1) * rows),
            })
            .collect();
        Self::new(parts, samples, self.seq_len)
    }
}

/// Seeded regression/classification task with a fixed random linear teacher
/// producing the targets.
///
/// Token `t` of every sequence is `positional[t] + token_noise·z` with `z`
/// standard normal, so consecutive micro-batches share a persistent
/// component, as token positions do in real sequence data, and differ by the
/// noise. With `positional` all zeros the inputs are plain standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTask {
    pub teacher: Matrix,
    /// `seq_len × input_dim`
    pub positional: Matrix,
    pub token_noise: f64,
    pub seq_len: usize,
    pub loss: Loss,
    /// Teacher sees inputs standardized per micro-batch, matching a student
    /// that normalizes its input.
    pub normalize: bool,
    pub seed: u64,
}

impl TeacherTask {
    /// Task with i.i.d. standard-normal tokens.
    pub fn new(input_dim: usize, output_dim: usize, seq_len: usize, loss: Loss, seed: u64) -> Self {
        let scale = 1.0 / (input_dim as f64).sqrt();
        let teacher = Matrix::seeded_normal(output_dim, input_dim, seed ^ 0x7eac_4e72).scale(scale);
        Self {
            teacher,
            positional: Matrix::zeros(seq_len, input_dim),
            token_noise: 1.0,
            seq_len,
            loss,
            normalize: true,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.teacher.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.teacher.rows()
    }

    pub fn targets_for(&self, input: &Matrix) -> Result<Matrix> {
        let x = if self.normalize {
            standardize_columns(input)
        } else {
            input.clone()
        };
        let y = x.matmul_t(&self.teacher)?;
        Ok(match self.loss {
            Loss::Mse => y,
            Loss::CrossEntropy => one_hot_argmax(&y),
        })
    }

    /// Mini-batch number `index`: `microbatches` groups of `samples`
    /// sequences. The same index always yields the same data.
    pub fn minibatch(&self, index: u64, microbatches: usize, samples: usize) -> Result<Minibatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
        let rows = samples * self.seq_len;
        let parts = (0..microbatches)
            .map(|_| {
                let input = self.sample_input(rows, &mut rng);
                let target = self.targets_for(&input)?;
                Ok(Microbatch { input, target })
            })
            .collect::<Result<Vec<_>>>()?;
        Minibatch::new(parts, samples, self.seq_len)
    }

    /// Adds a standard-normal per-position pattern and scales the per-token
    /// part by `token_noise`.
    pub fn with_positional(mut self, token_noise: f64) -> Self {
        self.positional = Matrix::seeded_normal(self.seq_len, self.input_dim(), self.seed ^ 0x9051_7104);
        self.token_noise = token_noise;
        self
    }

    fn sample_input(&self, rows: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let z = Matrix::random_normal(rows, self.input_dim(), rng);
        Matrix::from_fn(rows, self.input_dim(), |r, c| {
            self.positional.get(r % self.seq_len, c) + self.token_noise * z.get(r, c)
        })
    }
}

fn one_hot_argmax(y: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let row = y.row(r);
        let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        out.set(r, best, 1.0);
    }
    out
}
