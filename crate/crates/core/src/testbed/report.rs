use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conditions::measure_conditions;
use super::train::{IterationRecord, Mode};
use super::TestbedConfig;
use crate::error::Result;

/// Loss trajectory of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mode: Mode,
    pub losses: Vec<f64>,
    /// `‖G* − G‖ / ‖G‖` per iteration.
    pub grad_errors: Vec<f64>,
    pub diverged: bool,
}

impl Curve {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains one model per mode from the same initialization on the same
/// mini-batch sequence for `config.iterations` iterations.
pub fn convergence_compare(config: &TestbedConfig, modes: &[Mode]) -> Result<Vec<Curve>> {
    let batches = (0..config.iterations)
        .map(|i| config.minibatch(i as u64))
        .collect::<Result<Vec<_>>>()?;
    modes
        .iter()
        .map(|&mode| {
            let mut trainer = config.trainer(mode)?;
            trainer.settings.keep_traces = false;
            let mut curve = Curve {
                mode,
                losses: Vec::with_capacity(batches.len()),
                grad_errors: Vec::with_capacity(batches.len()),
                diverged: false,
            };
            for batch in &batches {
                let rec = trainer.run_iteration(batch)?;
                curve.losses.push(rec.loss);
                curve.grad_errors.push(rec.relative_grad_error());
                if rec.diverged {
                    curve.diverged = true;
                    break;
                }
            }
            Ok(curve)
        })
        .collect()
}

/// One line of the per-iteration metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u64,
    pub mode: Mode,
    pub loss: f64,
    pub grad_rel_error: f64,
    pub layer_cosines: Vec<f64>,
    /// `(layer, avg_eps, avg_dy, cos_eps_dy)` per boundary; empty when the
    /// record carries no residuals.
    pub conditions: Vec<(usize, f64, f64, f64)>,
}

impl IterationRow {
    pub fn from_record(rec: &IterationRecord) -> Self {
        let conditions = measure_conditions(rec)
            .map(|cs| {
                cs.iter()
                    .map(|c| (c.layer, c.avg_eps, c.avg_dy, c.cos_eps_dy))
                    .collect()
            })
            .unwrap_or_default();
        Self {
            iteration: rec.iteration,
            mode: rec.mode,
            loss: rec.loss,
            grad_rel_error: rec.relative_grad_error(),
            layer_cosines: rec.layer_cosines(),
            conditions,
        }
    }
}

/// CSV with columns `iteration,mode,loss,grad_rel_error,cos_layer_<k>…,`
/// then `avg_eps_y<l>,avg_dy_y<l>,cos_eps_dy_y<l>` per boundary. Column sets
/// come from the widest row; missing values are left empty.
pub fn iteration_csv<W: Write>(out: W, rows: &[IterationRow]) -> csv::Result<()> {
    let layers = rows.iter().map(|r| r.layer_cosines.len()).max().unwrap_or(0);
    let boundaries: Vec<usize> = rows
        .iter()
        .max_by_key(|r| r.conditions.len())
        .map(|r| r.conditions.iter().map(|c| c.0).collect())
        .unwrap_or_default();

    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["iteration", "mode", "loss", "grad_rel_error"]
        .map(String::from)
        .to_vec();
    header.extend((1..=layers).map(|k| format!("cos_layer_{k}")));
    for l in &boundaries {
        header.extend([
            format!("avg_eps_y{l}"),
            format!("avg_dy_y{l}"),
            format!("cos_eps_dy_y{l}"),
        ]);
    }
    w.write_record(&header)?;

    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            r.mode.as_str().to_string(),
            r.loss.to_string(),
            r.grad_rel_error.to_string(),
        ];
        rec.extend((0..layers).map(|k| r.layer_cosines.get(k).map(f64::to_string).unwrap_or_default()));
        for (b, _) in boundaries.iter().enumerate() {
            match r.conditions.get(b) {
                Some(&(_, e, d, c)) => rec.extend([e.to_string(), d.to_string(), c.to_string()]),
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_iteration_csv(rows: &[IterationRow], path: &Path) -> csv::Result<()> {
    iteration_csv(std::fs::File::create(path)?, rows)
}
