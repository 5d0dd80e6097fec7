use anyhow::Context as _;
use commsim::testbed::{verify, write_iteration_csv, Check};

use crate::{display, Context, Failure};

fn write_checks(checks: &[Check], path: &std::path::Path) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["check", "value", "threshold", "passed", "detail"])?;
    for c in checks {
        w.write_record([
            c.name.as_str(),
            &c.value.to_string(),
            &c.threshold.to_string(),
            if c.passed { "true" } else { "false" },
            c.detail.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv` (per iteration and mode) and `checks.csv`; fails
/// with the names of the broken invariants.
pub fn run(ctx: &Context) -> Result<(), Failure> {
    let report = verify(&ctx.config.testbed).context("running the testbed")?;

    let metrics = ctx.path("metrics.csv");
    write_iteration_csv(&report.rows, &metrics).with_context(|| format!("writing {}", display(&metrics)))?;
    let checks = ctx.path("checks.csv");
    write_checks(&report.checks, &checks).with_context(|| format!("writing {}", display(&checks)))?;

    for c in &report.checks {
        println!(
            "{} {:<28} {:>12.4e} (limit {:.1e})  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.detail
        );
    }
    let f = &report.forward;
    if f.diverged {
        println!("cb_forward: diverged (reported, not a failure)");
    } else {
        println!(
            "cb_forward: final loss {:.4} vs reference {:.4} ({:.2}x, reported, not a failure)",
            f.final_loss,
            f.reference_final_loss,
            f.loss_ratio()
        );
    }
    println!("metrics: {}", display(&metrics));

    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join(", ")))
    }
}
