use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use super::{Breakdown, Timeline};

/// Chrome trace-event JSON: one complete (`"ph": "X"`) event per schedule
/// event, `pid` 0, `tid` the stage, times in microseconds.
pub fn chrome_trace(t: &Timeline) -> Value {
    let events: Vec<Value> = t
        .events
        .iter()
        .map(|e| {
            json!({
                "name": e.label(),
                "cat": if e.kind.is_compute() { "compute" } else { "comm" },
                "ph": "X",
                "pid": 0,
                "tid": e.device,
                "ts": e.start * 1e6,
                "dur": e.duration() * 1e6,
                "args": {
                    "id": e.id,
                    "kind": e.kind.as_str(),
                    "microbatch": e.microbatch,
                    "peer": e.peer,
                    "compressed": e.compressed,
                },
            })
        })
        .collect();
    json!({ "traceEvents": events, "displayTimeUnit": "ms" })
}

pub fn write_chrome_trace(t: &Timeline, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &chrome_trace(t))?;
    f.flush()
}

/// CSV rows `scenario,class,exposed_seconds,makespan_seconds`; one row per
/// communication class plus a `TOTAL` row (makespan minus compute-only
/// makespan).
pub fn breakdown_csv<W: Write>(out: W, rows: &[(String, Breakdown)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "class", "exposed_seconds", "makespan_seconds"])?;
    for (scenario, b) in rows {
        for (class, exposed) in &b.exposed {
            w.write_record([
                scenario.as_str(),
                class.as_str(),
                &exposed.to_string(),
                &b.makespan.to_string(),
            ])?;
        }
        w.write_record([
            scenario.as_str(),
            "TOTAL",
            &b.total_exposed().to_string(),
            &b.makespan.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_breakdown_csv(rows: &[(String, Breakdown)], path: &Path) -> csv::Result<()> {
    breakdown_csv(std::fs::File::create(path)?, rows)
}
