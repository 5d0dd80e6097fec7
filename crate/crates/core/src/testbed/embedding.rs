use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tiny language model whose embedding table is used twice: as the input
/// lookup on the first stage and as the output projection on the last.
/// `replicas` data-parallel copies see independent token shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiedEmbeddingModel {
    /// `vocab × d`
    pub embedding: Matrix,
    /// `d × d` mixing layer between the two uses.
    pub mixer: Matrix,
    pub replicas: usize,
    pub tokens_per_replica: usize,
    pub seed: u64,
}

/// Gradient contributions of one replica to the shared table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub input_side: Matrix,
    pub output_side: Matrix,
}

impl TiedEmbeddingModel {
    pub fn new(vocab: usize, dim: usize, replicas: usize, tokens_per_replica: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || dim == 0 || replicas == 0 || tokens_per_replica == 0 {
            return Err(Error::InvalidArgument("embedding model sizes must be positive".into()));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            embedding: Matrix::seeded_normal(vocab, dim, seed).scale(scale),
            mixer: Matrix::seeded_normal(dim, dim, seed ^ 0x5eed).scale(scale),
            replicas,
            tokens_per_replica,
            seed,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    /// Next-token cross-entropy gradients for every replica. All replicas
    /// start from the same table.
    pub fn replica_gradients(&self) -> Result<Vec<EmbeddingGrads>> {
        (0..self.replicas).map(|r| self.gradients_for(r)).collect()
    }

    fn gradients_for(&self, replica: usize) -> Result<EmbeddingGrads> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1 + replica as u64));
        let t = self.tokens_per_replica;
        let vocab = self.vocab();
        let tokens: Vec<usize> = (0..=t).map(|_| rng.random_range(0..vocab)).collect();
        let scale = 1.0 / t as f64;

        // h = E[x], z = h·Wᵀ, logits = z·Eᵀ
        let h = Matrix::from_rows(&tokens[..t].iter().map(|&x| self.embedding.row(x)).collect::<Vec<_>>());
        let z = h.matmul_t(&self.mixer)?;
        let logits = z.matmul_t(&self.embedding)?;
        let mut dlogits = Matrix::zeros(t, vocab);
        for (r, &next) in tokens[1..].iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let g = dlogits.row_mut(r);
            for c in 0..vocab {
                g[c] = scale * (row[c] - max).exp() / denom;
            }
            g[next] -= scale;
        }

        let output_side = dlogits.t_matmul(&z)?;
        let dz = dlogits.matmul(&self.embedding)?;
        let dh = dz.matmul(&self.mixer)?;
        let mut input_side = Matrix::zeros(vocab, self.embedding.cols());
        for (r, &x) in tokens[..t].iter().enumerate() {
            for (acc, v) in input_side.row_mut(x).iter_mut().zip(dh.row(r)) {
                *acc += v;
            }
        }
        Ok(EmbeddingGrads {
            input_side,
            output_side,
        })
    }
}

fn sum_in_order<'a>(parts: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
    let mut iter = parts.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?
        .clone();
    for m in iter {
        acc.add_assign(m)?;
    }
    Ok(acc)
}

/// Conventional synchronization: one all-reduce per embedding copy across
/// the `D` replicas, then the two copies are averaged with each other.
pub fn sequential_average(grads: &[EmbeddingGrads]) -> Result<Matrix> {
    let d = grads.len() as f64;
    let input = sum_in_order(grads.iter().map(|g| &g.input_side))?.scale(1.0 / d);
    let output = sum_in_order(grads.iter().map(|g| &g.output_side))?.scale(1.0 / d);
    Ok(input.add(&output)?.scale(0.5))
}

/// Fused synchronization: a single all-reduce over all `2D` copies. Each
/// replica's two copies are combined first, then replicas are summed in
/// rank order.
pub fn fused_average(grads: &[EmbeddingGrads]) -> Result<Matrix> {
    let pairs = grads
        .iter()
        .map(|g| g.input_side.add(&g.output_side))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_in_order(&pairs)?.scale(1.0 / (2 * grads.len()) as f64))
}

/// `max |sequential − fused|` over the table.
pub fn fused_embedding_check(model: &TiedEmbeddingModel) -> Result<f64> {
    let grads = model.replica_gradients()?;
    sequential_average(&grads)?.max_abs_diff(&fused_average(&grads)?)
}
