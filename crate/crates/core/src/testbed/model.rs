use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{orthogonalize_seeded, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Purely linear layers, no bias.
    #[default]
    Identity,
    /// `tanh` after every layer except the last.
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½‖ŷ − t‖²` per row.
    #[default]
    Mse,
    /// Softmax cross-entropy against one-hot rows.
    CrossEntropy,
}

impl Loss {
    /// Summed (not averaged) loss over the rows and its gradient with respect
    /// to the outputs, both multiplied by `scale`.
    pub fn evaluate(self, out: &Matrix, target: &Matrix, scale: f64) -> Result<(f64, Matrix)> {
        if out.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss",
                left: out.shape(),
                right: target.shape(),
            });
        }
        match self {
            Loss::Mse => {
                let diff = out.sub(target)?;
                let loss = 0.5 * diff.data().iter().map(|v| v * v).sum::<f64>();
                Ok((scale * loss, diff.scale(scale)))
            }
            Loss::CrossEntropy => {
                let mut grad = Matrix::zeros(out.rows(), out.cols());
                let mut loss = 0.0;
                for r in 0..out.rows() {
                    let z = out.row(r);
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    let log_denom = denom.ln();
                    let g = grad.row_mut(r);
                    for (c, &t) in target.row(r).iter().enumerate() {
                        let logp = z[c] - max - log_denom;
                        loss -= t * logp;
                        g[c] = scale * (logp.exp() - t);
                    }
                }
                Ok((scale * loss, grad))
            }
        }
    }
}

/// Multi-layer perceptron `Y_k = φ(Y_{k−1}·W_kᵀ)` split into contiguous
/// pipeline stages. Rows of an activation are samples (tokens); columns are
/// features, so `W_k` is `d_k × d_{k−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedMlp {
    pub weights: Vec<Matrix>,
    /// Layer index ranges, one per stage.
    pub stages: Vec<Range<usize>>,
    /// Standardize each micro-batch's input columns before stage 0.
    pub normalize_input: bool,
    pub learning_rate: f64,
    pub loss: Loss,
    pub activation: Activation,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the (possibly normalized) input, `acts[k]` the output of
    /// layer `k`.
    pub acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("at least the input")
    }
}

impl StagedMlp {
    /// Layer widths `dims[0] → dims[1] → … → dims[K]` split as evenly as
    /// possible into `stages` stages, with orthogonal initialization.
    pub fn new(dims: &[usize], stages: usize, seed: u64) -> Result<Self> {
        let layers = dims.len().saturating_sub(1);
        if layers == 0 || stages == 0 || stages > layers {
            return Err(Error::InvalidArgument(format!(
                "cannot split {layers} layers into {stages} stages"
            )));
        }
        let weights = (0..layers)
            .map(|k| orthogonal_init(dims[k + 1], dims[k], seed.wrapping_add(k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            weights,
            stages: even_split(layers, stages),
            normalize_input: true,
            learning_rate: 0.1,
            loss: Loss::Mse,
            activation: Activation::Identity,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.layers() - 1].rows()
    }

    /// Layer indices whose outputs cross a stage boundary, one per boundary.
    pub fn boundaries(&self) -> Vec<usize> {
        self.stages[..self.stages.len() - 1].iter().map(|r| r.end).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        for (k, w) in self.weights.windows(2).enumerate() {
            if w[1].cols() != w[0].rows() {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    left: self.weights[k].shape(),
                    right: self.weights[k + 1].shape(),
                });
            }
        }
        let mut next = 0;
        for r in &self.stages {
            if r.start != next || r.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "stages must be contiguous and non-empty, got {:?}",
                    self.stages
                )));
            }
            next = r.end;
        }
        if next != self.layers() {
            return Err(Error::InvalidArgument(format!(
                "stages cover {next} of {} layers",
                self.layers()
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Input as seen by layer 1.
    pub fn prepare_input(&self, x: &Matrix) -> Matrix {
        if self.normalize_input {
            standardize_columns(x)
        } else {
            x.clone()
        }
    }

    /// Applies layer `k` (0-based) to `input`.
    pub fn layer_forward(&self, k: usize, input: &Matrix) -> Result<Matrix> {
        let z = input.matmul_t(&self.weights[k])?;
        Ok(if self.is_hidden(k) { self.activate(z) } else { z })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output of layer `k`)
    /// through that layer, returning `(∇W_k, ∇input)`.
    pub fn layer_backward(
        &self,
        k: usize,
        input: &Matrix,
        output: &Matrix,
        d_out: &Matrix,
    ) -> Result<(Matrix, Matrix)> {
        let dz = if self.is_hidden(k) && self.activation == Activation::Tanh {
            let mut dz = d_out.clone();
            for (g, y) in dz.data_mut().iter_mut().zip(output.data()) {
                *g *= 1.0 - y * y;
            }
            dz
        } else {
            d_out.clone()
        };
        let dw = dz.t_matmul(input)?;
        let d_in = dz.matmul(&self.weights[k])?;
        Ok((dw, d_in))
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        let mut acts = Vec::with_capacity(self.layers() + 1);
        acts.push(self.prepare_input(x));
        for k in 0..self.layers() {
            let next = self.layer_forward(k, &acts[k])?;
            acts.push(next);
        }
        Ok(ForwardCache { acts })
    }

    /// Loss and weight gradients for one chunk of rows, both multiplied by
    /// `scale` (typically `1 / total rows` of the mini-batch).
    pub fn loss_and_gradients(&self, x: &Matrix, target: &Matrix, scale: f64) -> Result<(f64, Vec<Matrix>)> {
        let cache = self.forward(x)?;
        let (loss, mut d) = self.loss.evaluate(cache.output(), target, scale)?;
        let mut grads = Vec::with_capacity(self.layers());
        for k in (0..self.layers()).rev() {
            let (dw, d_in) = self.layer_backward(k, &cache.acts[k], &cache.acts[k + 1], &d)?;
            grads.push(dw);
            d = d_in;
        }
        grads.reverse();
        Ok((loss, grads))
    }

    pub fn loss_value(&self, x: &Matrix, target: &Matrix, scale: f64) -> Result<f64> {
        let cache = self.forward(x)?;
        Ok(self.loss.evaluate(cache.output(), target, scale)?.0)
    }

    /// `W ← W − η·G`
    pub fn apply_update(&mut self, grads: &[Matrix]) -> Result<()> {
        for (w, g) in self.weights.iter_mut().zip(grads) {
            w.axpy(-self.learning_rate, g)?;
        }
        Ok(())
    }

    /// Order-sensitive fingerprint of the exact weight bits.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the little-endian bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in &self.weights {
            for v in w.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn is_hidden(&self, k: usize) -> bool {
        k + 1 < self.layers()
    }

    fn activate(&self, z: Matrix) -> Matrix {
        match self.activation {
            Activation::Identity => z,
            Activation::Tanh => z.map(f64::tanh),
        }
    }
}

fn even_split(layers: usize, stages: usize) -> Vec<Range<usize>> {
    let (base, extra) = (layers / stages, layers % stages);
    let mut start = 0;
    (0..stages)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// `rows × cols` matrix with orthonormal rows or columns, whichever is
/// shorter.
pub fn orthogonal_init(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    if rows >= cols {
        orthogonalize_seeded(&Matrix::seeded_normal(rows, cols, seed), seed)
    } else {
        Ok(orthogonalize_seeded(&Matrix::seeded_normal(cols, rows, seed), seed)?.transpose())
    }
}

/// Zero mean and unit variance per column. Constant columns are only
/// centered.
pub fn standardize_columns(x: &Matrix) -> Matrix {
    let (rows, cols) = x.shape();
    let mut out = x.clone();
    for c in 0..cols {
        let mean = (0..rows).map(|r| x.get(r, c)).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / rows as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for r in 0..rows {
            out.set(r, c, (x.get(r, c) - mean) * inv);
        }
    }
    out
}
