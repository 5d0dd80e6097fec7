use serde::{Deserialize, Serialize};

use super::train::IterationRecord;
use crate::error::{Error, Result};
use crate::matrix::{cosine_similarity, Matrix};

/// Statistics of the residual `ε^{(i)}` and the activation difference
/// `ΔY^{(i)} = Y^{(i)} − Y^{(i+1)}` between consecutive micro-batches on one
/// boundary. Lazily propagated errors cancel on average when both means
/// vanish and the two are uncorrelated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub layer: usize,
    /// Consecutive micro-batch pairs measured.
    pub pairs: usize,
    pub avg_eps: f64,
    pub avg_dy: f64,
    /// Mean over pairs of `cos(ε^{(i)}, ΔY^{(i)})`; pairs with a zero side
    /// are skipped.
    pub cos_eps_dy: f64,
    pub rms_eps: f64,
    pub rms_dy: f64,
}

#[derive(Default)]
struct Acc {
    pairs: usize,
    sum_eps: f64,
    sum_dy: f64,
    sq_eps: f64,
    sq_dy: f64,
    entries: usize,
    cos_sum: f64,
    cos_count: usize,
}

impl Acc {
    fn push(&mut self, eps: &Matrix, dy: &Matrix) -> Result<()> {
        self.pairs += 1;
        self.entries += eps.len();
        self.sum_eps += eps.sum();
        self.sum_dy += dy.sum();
        self.sq_eps += eps.data().iter().map(|v| v * v).sum::<f64>();
        self.sq_dy += dy.data().iter().map(|v| v * v).sum::<f64>();
        match cosine_similarity(eps, dy) {
            Ok(c) => {
                self.cos_sum += c;
                self.cos_count += 1;
            }
            Err(Error::UndefinedSimilarity) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn finish(self, layer: usize) -> BoundaryConditions {
        let n = self.entries.max(1) as f64;
        BoundaryConditions {
            layer,
            pairs: self.pairs,
            avg_eps: self.sum_eps / n,
            avg_dy: self.sum_dy / n,
            cos_eps_dy: if self.cos_count == 0 {
                0.0
            } else {
                self.cos_sum / self.cos_count as f64
            },
            rms_eps: (self.sq_eps / n).sqrt(),
            rms_dy: (self.sq_dy / n).sqrt(),
        }
    }
}

/// Per-boundary conditions of one iteration.
pub fn measure_conditions(record: &IterationRecord) -> Result<Vec<BoundaryConditions>> {
    measure_conditions_over(std::slice::from_ref(record))
}

/// Pools the pairs of several iterations; pairs never straddle an
/// iteration, since the weights change in between.
pub fn measure_conditions_over(records: &[IterationRecord]) -> Result<Vec<BoundaryConditions>> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no records to measure".into()))?;
    let mut accs: Vec<Acc> = first.boundaries.iter().map(|_| Acc::default()).collect();
    for record in records {
        if record.boundaries.len() != accs.len() {
            return Err(Error::InvalidArgument("records come from different models".into()));
        }
        for (acc, trace) in accs.iter_mut().zip(&record.boundaries) {
            let m = trace.activations.len();
            if m < 2 || trace.residuals.len() != m {
                return Err(Error::InvalidArgument(format!(
                    "boundary after layer {} needs residuals for at least two micro-batches, has {} of {m}",
                    trace.layer,
                    trace.residuals.len()
                )));
            }
            for i in 0..m - 1 {
                let dy = trace.activations[i].sub(&trace.activations[i + 1])?;
                acc.push(&trace.residuals[i], &dy)?;
            }
        }
    }
    Ok(accs
        .into_iter()
        .zip(&first.boundaries)
        .map(|(acc, t)| acc.finish(t.layer))
        .collect())
}
