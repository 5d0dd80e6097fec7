use anyhow::Context as _;
use commsim::config::{SweepAxis, SweepPoint};
use commsim::pipesim::{breakdown, simulate, Ablation, Breakdown, CommClass};
use rayon::prelude::*;

use crate::{display, Context, Failure};

struct Row {
    point: SweepPoint,
    result: Breakdown,
    baseline_makespan: f64,
}

/// Writes `sweep_<axis>.csv`, one row per configured value in order.
pub fn run(ctx: &Context, axis: &str) -> Result<(), Failure> {
    let axis = SweepAxis::parse(axis).ok_or_else(|| {
        Failure::Usage(format!(
            "unknown axis {axis:?}; expected pipeline_stages, rank, sc_fraction or bandwidth"
        ))
    })?;
    let points = ctx.config.sweep_points(axis, &ctx.policy);
    if points.is_empty() {
        return Err(Failure::Usage(format!("sweep.{} has no values", axis.name())));
    }

    // Points run in parallel; collect() keeps the configured order.
    let rows: Vec<Row> = points
        .into_par_iter()
        .map(|point| {
            let result = breakdown(&point.parallel, &point.cost, &point.policy);
            let base = Ablation::Baseline.policy(&point.policy);
            let baseline_makespan = simulate(&point.parallel, &point.cost, &base).makespan;
            Row {
                point,
                result,
                baseline_makespan,
            }
        })
        .collect();

    let path = ctx.path(&format!("sweep_{}.csv", axis.name()));
    write(&rows, &ctx.policy_name, &path).with_context(|| format!("writing {}", display(&path)))?;

    println!(
        "{:>14} {:>12} {:>12} {:>8}",
        axis.name(),
        "makespan_s",
        "baseline_s",
        "speedup"
    );
    for r in &rows {
        println!(
            "{:>14} {:>12.6} {:>12.6} {:>8.4}",
            r.point.value,
            r.result.makespan,
            r.baseline_makespan,
            r.baseline_makespan / r.result.makespan
        );
    }
    println!("sweep: {}", display(&path));
    Ok(())
}

fn write(rows: &[Row], policy: &str, path: &std::path::Path) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "axis",
        "value",
        "policy",
        "makespan_seconds",
        "baseline_makespan_seconds",
        "speedup",
        "compression_ratio_cb",
        "exposed_p2p",
        "exposed_dp_allreduce",
        "exposed_emb_sync",
        "total_exposed",
    ])?;
    for r in rows {
        let b = &r.result;
        w.write_record([
            r.point.axis.name().to_string(),
            r.point.value.to_string(),
            policy.to_string(),
            b.makespan.to_string(),
            r.baseline_makespan.to_string(),
            (r.baseline_makespan / b.makespan).to_string(),
            r.point.cost.compression_ratio_cb.to_string(),
            b.exposed(CommClass::P2p).to_string(),
            b.exposed(CommClass::DpAllreduce).to_string(),
            b.exposed(CommClass::EmbSync).to_string(),
            b.total_exposed().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
