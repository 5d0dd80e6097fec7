use std::collections::BTreeSet;

use super::{EventId, EventKind, ScheduleEvent, Timeline};

const TIME_EPS: f64 = 1e-12;

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIME_EPS * a.abs().max(b.abs()).max(1.0)
}

/// Zero-slack chain from the first event to the one that finishes last.
///
/// Every event starts at the latest end among its predecessors, so walking
/// back through a predecessor that ends exactly at the current start always
/// reaches time zero and the chain's durations sum to the makespan. Compute
/// predecessors are preferred over communication when several bind at once.
/// Zero-duration events are left out of the returned chain.
pub fn critical_path(t: &Timeline) -> Vec<EventId> {
    let Some(mut cur) = t
        .events
        .iter()
        .filter(|e| same_time(e.end, t.makespan))
        .min_by(|a, b| rank(a).cmp(&rank(b)))
    else {
        return Vec::new();
    };

    let mut chain = vec![cur.id];
    loop {
        let binding = cur
            .predecessors
            .iter()
            .map(|&p| t.event(p))
            .filter(|p| same_time(p.end, cur.start))
            .min_by(|a, b| rank(a).cmp(&rank(b)));
        match binding {
            Some(p) => {
                chain.push(p.id);
                cur = p;
            }
            None => break,
        }
    }
    chain.reverse();
    chain.retain(|&id| t.event(id).duration() > 0.0);
    chain
}

/// Preference order among simultaneous candidates: busy compute first, then
/// any event with a duration, then lowest id.
fn rank(e: &ScheduleEvent) -> (u8, u8, EventId) {
    (u8::from(!e.kind.is_compute()), u8::from(e.duration() <= 0.0), e.id)
}

/// Backward point-to-point transfers with zero slack: the transfer takes
/// time and the receiving stage's next computation starts the moment it
/// lands, so shortening it would move that computation earlier.
///
/// This is the operational definition of the pipeline epilogue. A transfer
/// that lands exactly when the receiver frees up counts as gating.
pub fn epilogue_set(t: &Timeline) -> BTreeSet<EventId> {
    let mut out = BTreeSet::new();
    for send in t.of_kind(EventKind::P2pBwd) {
        if send.duration() <= 0.0 {
            continue;
        }
        let consumer = t.events.iter().find(|e| {
            matches!(e.kind, EventKind::Bwd | EventKind::Decompress)
                && e.device == send.peer.unwrap_or(usize::MAX)
                && e.predecessors.contains(&send.id)
        });
        if consumer.is_some_and(|c| same_time(c.start, send.end)) {
            out.insert(send.id);
        }
    }
    out
}

/// `(sender stage, micro-batch)` of each epilogue transfer.
pub(crate) fn epilogue_sends(t: &Timeline) -> BTreeSet<(usize, usize)> {
    epilogue_set(t)
        .into_iter()
        .map(|id| {
            let e = t.event(id);
            (e.device, e.microbatch.expect("p2p events carry a micro-batch"))
        })
        .collect()
}
