use anyhow::Context as _;
use commsim::pipesim::{breakdown, simulate, write_breakdown_csv, write_chrome_trace, Ablation, CommClass};

use crate::{display, Context, Failure};

/// Writes `trace.json` for the selected policy and `breakdown.csv` for the
/// four ablations, and prints one makespan line per ablation.
pub fn run(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let sim = simulate(&c.parallel, &c.cost, &ctx.policy);
    let trace = ctx.path("trace.json");
    write_chrome_trace(&sim.timeline, &trace).with_context(|| format!("writing {}", display(&trace)))?;

    let rows: Vec<(String, _)> = Ablation::ALL
        .iter()
        .map(|a| {
            let b = breakdown(&c.parallel, &c.cost, &a.policy(&c.policy));
            (format!("{}/{}", c.scenario, a.name()), b)
        })
        .collect();
    let csv_path = ctx.path("breakdown.csv");
    write_breakdown_csv(&rows, &csv_path).with_context(|| format!("writing {}", display(&csv_path)))?;

    let base = rows[0].1.total_exposed();
    println!("scenario {}", c.scenario);
    println!(
        "{:<10} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
        "policy", "makespan_s", "exposed_s", "reduction", "P2P", "DP", "EMB"
    );
    for (a, (_, b)) in Ablation::ALL.iter().zip(&rows) {
        let reduction = if base > 0.0 {
            format!("{:.1}%", 100.0 * (1.0 - b.total_exposed() / base))
        } else {
            "-".into()
        };
        println!(
            "{:<10} {:>12.6} {:>12.6} {:>10} {:>10.4} {:>10.4} {:>10.4}",
            a.name(),
            b.makespan,
            b.total_exposed(),
            reduction,
            b.exposed(CommClass::P2p),
            b.exposed(CommClass::DpAllreduce),
            b.exposed(CommClass::EmbSync),
        );
    }
    println!(
        "trace ({} policy, makespan {:.6} s): {}",
        ctx.policy_name,
        sim.makespan,
        display(&trace)
    );
    println!("breakdown: {}", display(&csv_path));
    Ok(())
}
