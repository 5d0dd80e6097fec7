//! The invariant suite behind `commsim verify`.
//!
//! Two training runs are made. The *measurement* run starts from
//! initialization with compression on from the first iteration and lasts
//! until at least 150 consecutive micro-batch pairs have been seen; gradient
//! fidelity and the error-cancellation conditions are judged on it, because
//! both degrade as the model fits the data (the gradient loses its shared
//! component). The *training* run follows the configured warm-up and
//! iteration budget and supplies the exact bookkeeping checks, the
//! per-iteration metrics and the forward-compression outcome.

use serde::{Deserialize, Serialize};

use super::conditions::measure_conditions_over;
use super::embedding::{fused_embedding_check, TiedEmbeddingModel};
use super::report::IterationRow;
use super::train::{IterationRecord, Mode};
use super::TestbedConfig;
use crate::compress::{ef_step, lowrank_decompress, ErrorFeedbackBuffer, LowRankState};
use crate::error::Result;
use crate::matrix::Matrix;

pub const MIN_CONDITION_PAIRS: usize = 150;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const TELESCOPE_TOLERANCE: f64 = 1e-10;
pub const FIDELITY_MIN_COSINE: f64 = 0.99;
pub const CONDITION_MAX_COSINE: f64 = 0.1;
pub const CONDITION_MAX_MEAN: f64 = 0.05;
pub const FUSED_TOLERANCE: f64 = 1e-12;

/// Outcome of one named invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Worst observed value.
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
            detail,
        }
    }
}

/// What happened to the model trained with compressed forward activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardOutcome {
    pub diverged: bool,
    pub final_loss: f64,
    pub reference_final_loss: f64,
}

impl ForwardOutcome {
    /// Final loss relative to the reference; infinite once diverged.
    pub fn loss_ratio(&self) -> f64 {
        if self.diverged || !self.final_loss.is_finite() {
            f64::INFINITY
        } else {
            self.final_loss / self.reference_final_loss
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    /// Per-iteration metrics of the training run, every mode.
    pub rows: Vec<IterationRow>,
    pub forward: ForwardOutcome,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Iterations needed for `MIN_CONDITION_PAIRS` pairs with `m` micro-batches.
pub fn measurement_iterations(m: usize) -> usize {
    if m < 2 {
        1
    } else {
        MIN_CONDITION_PAIRS.div_ceil(m - 1)
    }
}

pub fn verify(config: &TestbedConfig) -> Result<VerifyReport> {
    config.validate()?;
    let mut checks = vec![gradient_oracle(config)?];
    checks.extend(measurement_checks(config)?);

    let (training, rows, forward) = training_run(config)?;
    checks.push(telescoping(&training));
    checks.push(staleness(&training));
    checks.push(error_feedback(config, &training)?);
    checks.push(fused_embedding(config.seed)?);
    Ok(VerifyReport { checks, rows, forward })
}

/// Central differences of the loss on a small model shaped like `config`.
fn gradient_oracle(config: &TestbedConfig) -> Result<Check> {
    let layers = config.layers.min(4);
    let small = TestbedConfig {
        layers,
        input_dim: config.input_dim.min(6),
        hidden_dim: config.hidden_dim.min(8),
        output_dim: config.output_dim.min(5),
        stages: config.stages.min(layers),
        microbatches: 2,
        microbatch_size: 2,
        seq_len: 2,
        ..config.clone()
    };
    let model = small.model()?;
    let batch = small.minibatch(0)?;
    let scale = 1.0 / batch.total_rows() as f64;
    let loss = |m: &super::StagedMlp| -> Result<f64> {
        batch
            .microbatches
            .iter()
            .map(|mb| m.loss_value(&mb.input, &mb.target, scale))
            .sum()
    };
    let mut analytic: Vec<Matrix> = Vec::new();
    for mb in &batch.microbatches {
        let (_, g) = model.loss_and_gradients(&mb.input, &mb.target, scale)?;
        if analytic.is_empty() {
            analytic = g;
        } else {
            for (a, g) in analytic.iter_mut().zip(&g) {
                a.add_assign(g)?;
            }
        }
    }
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut fd = Matrix::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let w = model.weights[k].get(i, j);
                let mut m = model.clone();
                m.weights[k].set(i, j, w + h);
                let up = loss(&m)?;
                m.weights[k].set(i, j, w - h);
                let down = loss(&m)?;
                fd.set(i, j, (up - down) / (2.0 * h));
            }
        }
        let err = a.sub(&fd)?.frobenius_norm() / fd.frobenius_norm().max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    Ok(Check::at_most(
        "gradient_oracle",
        worst,
        FD_TOLERANCE,
        format!("worst per-layer relative error vs finite differences, {layers} layers"),
    ))
}

fn measurement_checks(config: &TestbedConfig) -> Result<Vec<Check>> {
    let iterations = measurement_iterations(config.microbatches);
    let cold = TestbedConfig {
        warmup_iterations: 0,
        ..config.clone()
    };
    let mut lep = cold.trainer(Mode::CbLep)?;
    let mut nolep = cold.trainer(Mode::CbNolep)?;
    nolep.settings.keep_traces = false;
    let mut records = Vec::with_capacity(iterations);
    let mut min_cos = f64::INFINITY;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut lep_wins = true;
    for it in 0..iterations {
        let batch = cold.minibatch(it as u64)?;
        let a = lep.run_iteration(&batch)?;
        let b = nolep.run_iteration(&batch)?;
        min_cos = a.layer_cosines().into_iter().fold(min_cos, f64::min);
        let (ea, eb) = (a.grad_error(), b.grad_error());
        // Lossless compression leaves nothing to improve on.
        let negligible = eb <= 1e-9 * a.grad_norm().max(1.0);
        lep_wins &= ea < eb || negligible;
        worst_margin = worst_margin.max(ea - eb);
        records.push(a);
    }

    let mut checks = vec![
        Check::at_least(
            "gradient_fidelity",
            min_cos,
            FIDELITY_MIN_COSINE,
            format!("min per-layer cos(G*, G) under LEP over {iterations} iteration(s) from initialization"),
        ),
        Check {
            name: "lep_beats_nolep".into(),
            value: worst_margin,
            threshold: 0.0,
            passed: lep_wins,
            detail: "max over iterations of ‖G*−G‖ with LEP minus without".into(),
        },
    ];

    if config.microbatches < 2 {
        checks.push(Check {
            name: "conditions".into(),
            value: 0.0,
            threshold: CONDITION_MAX_COSINE,
            passed: true,
            detail: "skipped: needs at least two micro-batches".into(),
        });
        return Ok(checks);
    }
    let conds = measure_conditions_over(&records)?;
    let pairs = conds.first().map_or(0, |c| c.pairs);
    let worst_cos = conds.iter().map(|c| c.cos_eps_dy.abs()).fold(0.0, f64::max);
    let rel = |mean: f64, rms: f64| if rms == 0.0 { mean.abs() } else { mean.abs() / rms };
    let worst_eps = conds.iter().map(|c| rel(c.avg_eps, c.rms_eps)).fold(0.0, f64::max);
    let worst_dy = conds.iter().map(|c| rel(c.avg_dy, c.rms_dy)).fold(0.0, f64::max);
    checks.push(Check::at_most(
        "conditions_cos_eps_dy",
        worst_cos,
        CONDITION_MAX_COSINE,
        format!("max over boundaries of |mean cos(ε, ΔY)|, {pairs} pairs each"),
    ));
    checks.push(Check::at_most(
        "conditions_avg_eps",
        worst_eps,
        CONDITION_MAX_MEAN,
        "max over boundaries of |avg ε| / rms ε".into(),
    ));
    checks.push(Check::at_most(
        "conditions_avg_dy",
        worst_dy,
        CONDITION_MAX_MEAN,
        "max over boundaries of |avg ΔY| / rms ΔY".into(),
    ));
    Ok(checks)
}

/// Trains every mode for the configured budget. Returns the LEP records,
/// metric rows for all modes and the forward-compression outcome.
fn training_run(config: &TestbedConfig) -> Result<(Vec<IterationRecord>, Vec<IterationRow>, ForwardOutcome)> {
    let mut lep = config.trainer(Mode::CbLep)?;
    let mut others = [Mode::Reference, Mode::CbNolep, Mode::CbForward]
        .into_iter()
        .map(|m| {
            let mut t = config.trainer(m)?;
            t.settings.keep_traces = false;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(config.iterations);
    let mut rows = Vec::new();
    let (mut ref_loss, mut fwd_loss, mut fwd_diverged) = (f64::NAN, f64::NAN, false);
    for it in 0..config.iterations {
        let batch = config.minibatch(it as u64)?;
        let rec = lep.run_iteration(&batch)?;
        rows.push(IterationRow::from_record(&rec));
        records.push(rec);
        for t in others.iter_mut() {
            if t.mode == Mode::CbForward && t.diverged() {
                continue;
            }
            let rec = t.run_iteration(&batch)?;
            match t.mode {
                Mode::Reference => ref_loss = rec.loss,
                Mode::CbForward => {
                    fwd_loss = rec.loss;
                    fwd_diverged |= rec.diverged;
                }
                _ => {}
            }
            rows.push(IterationRow::from_record(&rec));
        }
    }
    let forward = ForwardOutcome {
        diverged: fwd_diverged,
        final_loss: fwd_loss,
        reference_final_loss: ref_loss,
    };
    Ok((records, rows, forward))
}

fn sum(ms: &[Matrix]) -> Result<Matrix> {
    let mut acc = ms[0].clone();
    for m in &ms[1..] {
        acc.add_assign(m)?;
    }
    Ok(acc)
}

/// On every compressed boundary: Σ received = Σ sent gradients + carried-in
/// residual − final residual.
fn telescoping(records: &[IterationRecord]) -> Check {
    let mut worst: f64 = 0.0;
    let mut links = 0;
    for rec in records.iter().filter(|r| r.compressed) {
        for trace in rec.boundaries.iter().filter(|t| !t.sent.is_empty()) {
            let outcome = (|| -> Result<f64> {
                let received = sum(&trace.sent)?;
                let mut expect = sum(&trace.link_inputs)?.sub(trace.residuals.last().expect("residual per send"))?;
                if let Some(r) = &trace.initial_residual {
                    expect.add_assign(r)?;
                }
                Ok(received.sub(&expect)?.frobenius_norm() / expect.frobenius_norm().max(f64::MIN_POSITIVE))
            })();
            worst = worst.max(outcome.unwrap_or(f64::INFINITY));
            links += 1;
        }
    }
    Check::at_most(
        "telescoping",
        worst,
        TELESCOPE_TOLERANCE,
        format!("worst relative violation over {links} boundary-iterations"),
    )
}

fn staleness(records: &[IterationRecord]) -> Check {
    let stale = records.iter().filter(|r| !r.staleness_free()).count();
    Check {
        name: "staleness_free".into(),
        value: stale as f64,
        threshold: 0.0,
        passed: stale == 0,
        detail: "iterations whose micro-batches saw different weights".into(),
    }
}

/// Iteration-level error feedback on each layer's exact gradient sequence,
/// compressed at the data-parallel rank.
fn error_feedback(config: &TestbedConfig, records: &[IterationRecord]) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let layers = records.first().map_or(0, |r| r.reference_grads.len());
    for k in 0..layers {
        let grads: Vec<&Matrix> = records.iter().map(|r| &r.reference_grads[k]).collect();
        let (rows, cols) = grads[0].shape();
        let mut buf = ErrorFeedbackBuffer::new(rows, cols);
        let mut state = LowRankState::new(config.rank_dp, config.seed.wrapping_add(2000 + k as u64));
        let mut received = Matrix::zeros(rows, cols);
        let mut total = Matrix::zeros(rows, cols);
        for g in &grads {
            received.add_assign(&lowrank_decompress(&ef_step(g, &mut buf, &mut state)?)?)?;
            total.add_assign(g)?;
        }
        let expect = total.sub(buf.residual())?;
        worst = worst.max(received.sub(&expect)?.frobenius_norm() / expect.frobenius_norm().max(f64::MIN_POSITIVE));
    }
    Ok(Check::at_most(
        "error_feedback_telescoping",
        worst,
        TELESCOPE_TOLERANCE,
        format!("rank {} over {} iterations, every layer", config.rank_dp, records.len()),
    ))
}

fn fused_embedding(seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for d in [1, 2, 4, 8] {
        let model = TiedEmbeddingModel::new(32, 16, d, 24, seed)?;
        worst = worst.max(fused_embedding_check(&model)?);
    }
    Ok(Check::at_most(
        "fused_embedding",
        worst,
        FUSED_TOLERANCE,
        "max |sequential − fused| over D in {1, 2, 4, 8}".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurement_window_reaches_pair_count() {
        assert_eq!(measurement_iterations(64), 3);
        assert_eq!(measurement_iterations(16), 10);
        assert_eq!(measurement_iterations(151), 1);
        assert_eq!(measurement_iterations(1), 1);
    }
}
