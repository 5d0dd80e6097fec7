use serde::{Deserialize, Serialize};

use super::Payload;
use crate::error::{Error, Result};
use crate::matrix::{orthogonalize_seeded, Matrix};

/// Per-link state of the low-rank compressor: the requested rank and the
/// right factor carried over from the previous call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowRankState {
    rank: usize,
    seed: u64,
    q: Option<Matrix>,
    calls: u64,
}

impl LowRankState {
    pub fn new(rank: usize, seed: u64) -> Self {
        assert!(rank > 0, "rank must be positive");
        Self {
            rank,
            seed,
            q: None,
            calls: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Factor that the next call starts its power iteration from.
    pub fn q(&self) -> Option<&Matrix> {
        self.q.as_ref()
    }

    /// Rank actually used for a `rows × cols` input. Ranks above the smaller
    /// dimension cannot be represented and are clamped.
    pub fn effective_rank(&self, rows: usize, cols: usize) -> usize {
        self.rank.min(rows).min(cols)
    }

    fn ensure_q(&mut self, rows: usize, cols: usize) -> Result<()> {
        let r = self.effective_rank(rows, cols);
        let reuse = matches!(&self.q, Some(q) if q.shape() == (cols, r));
        if !reuse {
            if self.q.is_some() {
                log::debug!("low-rank state reinitialized for a {rows}x{cols} input");
            }
            if r < self.rank {
                log::warn!(
                    "rank {} exceeds min({rows}, {cols}); compressing at rank {r}",
                    self.rank
                );
            }
            // Drawn row by row and transposed, so the starting factor for
            // rank r is a column prefix of the one for rank r + 1.
            self.q = Some(orthogonalize_seeded(
                &Matrix::seeded_normal(r, cols, self.seed).transpose(),
                self.seed,
            )?);
        }
        Ok(())
    }
}

/// Transmitted factors: `p_hat` (n×r, orthonormal columns) and `q` (m×r).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankPayload {
    pub p_hat: Matrix,
    pub q: Matrix,
    pub original_shape: (usize, usize),
}

impl LowRankPayload {
    pub fn rank(&self) -> usize {
        self.p_hat.cols()
    }
}

impl Payload for LowRankPayload {
    fn original_len(&self) -> usize {
        self.original_shape.0 * self.original_shape.1
    }

    fn payload_len(&self) -> usize {
        self.rank() * (self.original_shape.0 + self.original_shape.1)
    }
}

/// One step of power iteration starting from the stored factor:
/// `P = M·Q`, `P̂ = orth(P)`, `Q ← Mᵀ·P̂`.
pub fn lowrank_compress(m: &Matrix, state: &mut LowRankState) -> Result<LowRankPayload> {
    if !m.is_finite() {
        return Err(Error::NonFinite("lowrank_compress"));
    }
    let (rows, cols) = m.shape();
    state.ensure_q(rows, cols)?;
    let q_prev = state.q.as_ref().expect("initialized above");

    let p = m.matmul(q_prev)?;
    let fallback_seed = state.seed ^ state.calls.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let p_hat = orthogonalize_seeded(&p, fallback_seed)?;
    let q_new = m.t_matmul(&p_hat)?;

    state.q = Some(q_new.clone());
    state.calls += 1;
    Ok(LowRankPayload {
        p_hat,
        q: q_new,
        original_shape: (rows, cols),
    })
}

/// Reconstructs `P̂·Qᵀ`.
pub fn lowrank_decompress(payload: &LowRankPayload) -> Result<Matrix> {
    let (rows, cols) = payload.original_shape;
    let (p, q) = (&payload.p_hat, &payload.q);
    if p.rows() != rows || q.rows() != cols || p.cols() != q.cols() {
        return Err(Error::ShapeMismatch {
            op: "lowrank_decompress",
            left: p.shape(),
            right: q.shape(),
        });
    }
    p.matmul_t(q)
}

/// `n·m / (r·(n+m))`
pub fn lowrank_ratio(rows: usize, cols: usize, rank: usize) -> f64 {
    (rows * cols) as f64 / (rank * (rows + cols)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::orthonormality_defect;

    fn rank_one(n: usize, m: usize, seed: u64) -> Matrix {
        let u = Matrix::seeded_normal(n, 1, seed);
        let v = Matrix::seeded_normal(m, 1, seed + 100);
        u.matmul_t(&v).unwrap()
    }

    #[test]
    fn zero_matrix_reconstructs_to_zero() {
        for rank in [1, 3, 6] {
            let mut st = LowRankState::new(rank, 7);
            let z = Matrix::zeros(6, 5);
            let p = lowrank_compress(&z, &mut st).unwrap();
            assert_eq!(lowrank_decompress(&p).unwrap(), z);
            assert!(orthonormality_defect(&p.p_hat) < 1e-8);
            // and again once the stored factor has become zero
            let p = lowrank_compress(&z, &mut st).unwrap();
            assert_eq!(lowrank_decompress(&p).unwrap(), z);
        }
    }

    #[test]
    fn rank_one_is_exact() {
        let m = rank_one(20, 12, 3);
        let mut st = LowRankState::new(1, 1);
        let rec = lowrank_decompress(&lowrank_compress(&m, &mut st).unwrap()).unwrap();
        assert!(rec.relative_error(&m).unwrap() < 1e-9);
    }

    #[test]
    fn full_rank_is_lossless() {
        for (n, m) in [(8, 5), (5, 8), (6, 6)] {
            let a = Matrix::seeded_normal(n, m, 21);
            let mut st = LowRankState::new(n.min(m), 4);
            let rec = lowrank_decompress(&lowrank_compress(&a, &mut st).unwrap()).unwrap();
            assert!(rec.max_abs_diff(&a).unwrap() < 1e-12);
        }
    }

    #[test]
    fn oversized_rank_is_clamped() {
        let a = Matrix::seeded_normal(4, 3, 2);
        let mut st = LowRankState::new(10, 4);
        let p = lowrank_compress(&a, &mut st).unwrap();
        assert_eq!(p.rank(), 3);
        assert!(lowrank_decompress(&p).unwrap().max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn shape_change_reinitializes() {
        let mut st = LowRankState::new(2, 9);
        lowrank_compress(&Matrix::seeded_normal(6, 4, 1), &mut st).unwrap();
        assert_eq!(st.q().unwrap().shape(), (4, 2));
        lowrank_compress(&Matrix::seeded_normal(5, 7, 1), &mut st).unwrap();
        assert_eq!(st.q().unwrap().shape(), (7, 2));
    }

    #[test]
    fn nan_input_rejected() {
        let mut a = Matrix::zeros(3, 3);
        a.set(1, 1, f64::NAN);
        let mut st = LowRankState::new(1, 0);
        assert_eq!(
            lowrank_compress(&a, &mut st).unwrap_err(),
            Error::NonFinite("lowrank_compress")
        );
    }

    #[test]
    fn decompress_checks_shapes() {
        let bad = LowRankPayload {
            p_hat: Matrix::zeros(4, 2),
            q: Matrix::zeros(3, 2),
            original_shape: (4, 5),
        };
        assert!(lowrank_decompress(&bad).is_err());
    }

    #[test]
    fn residual_identity() {
        let a = Matrix::seeded_normal(10, 7, 5);
        let mut st = LowRankState::new(2, 5);
        let rec = lowrank_decompress(&lowrank_compress(&a, &mut st).unwrap()).unwrap();
        let residual = a.sub(&rec).unwrap();
        assert!(rec.add(&residual).unwrap().max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn ratio_formula() {
        assert_eq!(lowrank_ratio(1024, 1024, 16), 32.0);
        assert_eq!(lowrank_ratio(1024, 1024, 128), 4.0);
    }
}
