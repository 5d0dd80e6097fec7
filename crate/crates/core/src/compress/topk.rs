use serde::{Deserialize, Serialize};

use super::Payload;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// The `k` largest-magnitude entries of a matrix, as flat row-major indices
/// in increasing order and their values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKPayload {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub original_shape: (usize, usize),
}

impl TopKPayload {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

impl Payload for TopKPayload {
    fn original_len(&self) -> usize {
        self.original_shape.0 * self.original_shape.1
    }

    /// Each kept entry stores an index and a value.
    fn payload_len(&self) -> usize {
        2 * self.k()
    }
}

pub fn topk_compress(m: &Matrix, k: usize) -> Result<TopKPayload> {
    if k == 0 || k > m.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            m.len()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("topk_compress"));
    }
    let data = m.data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    // Larger magnitude first; equal magnitudes keep the lower index.
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let values = indices.iter().map(|&i| data[i]).collect();
    Ok(TopKPayload {
        indices,
        values,
        original_shape: m.shape(),
    })
}

pub fn topk_decompress(p: &TopKPayload) -> Result<Matrix> {
    let (rows, cols) = p.original_shape;
    if p.indices.len() != p.values.len() {
        return Err(Error::InvalidArgument(
            "top-k payload has mismatched index/value counts".into(),
        ));
    }
    if p.indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "top-k indices must be strictly increasing".into(),
        ));
    }
    let mut out = Matrix::zeros(rows, cols);
    let data = out.data_mut();
    for (&i, &v) in p.indices.iter().zip(&p.values) {
        *data
            .get_mut(i)
            .ok_or_else(|| Error::InvalidArgument(format!("top-k index {i} outside {rows}x{cols}")))? = v;
    }
    Ok(out)
}
