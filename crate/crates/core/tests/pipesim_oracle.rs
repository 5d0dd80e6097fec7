//! Simulator checks against an independent earliest-start oracle.

mod common;

use std::collections::BTreeSet;

use common::oracle_makespan;

use commsim::pipesim::{
    build_1f1b, critical_path, epilogue_set, simulate, CostModel, EventKind, ParallelConfig, Policy, Timeline,
};
use proptest::prelude::*;

fn config(p: usize, m: usize, d: usize) -> ParallelConfig {
    ParallelConfig::new(1, d, p, m)
}

fn cost_with(p2p: f64, dp_volume: f64, emb_volume: f64) -> CostModel {
    CostModel {
        activation_volume: p2p,
        grad_volume_per_stage: dp_volume,
        embedding_volume: emb_volume,
        ..CostModel::compute_only(1.0, 2.0)
    }
}

#[test]
fn single_stage_is_serial() {
    let t = build_1f1b(&config(1, 3, 1), &CostModel::compute_only(1.0, 2.0));
    assert_eq!(t.makespan, 9.0);
    t.validate().unwrap();
}

#[test]
fn two_stage_hand_schedule() {
    let t = build_1f1b(&config(2, 2, 1), &CostModel::compute_only(1.0, 2.0));
    assert_eq!(t.makespan, 9.0);
    let lane: Vec<(EventKind, usize, f64, f64)> = t
        .lane(0)
        .iter()
        .map(|e| (e.kind, e.microbatch.unwrap(), e.start, e.end))
        .collect();
    assert_eq!(
        lane,
        vec![
            (EventKind::Fwd, 0, 0.0, 1.0),
            (EventKind::Fwd, 1, 1.0, 2.0),
            (EventKind::Bwd, 0, 4.0, 6.0),
            (EventKind::Bwd, 1, 7.0, 9.0),
        ]
    );
}

#[test]
fn matches_oracle_on_grid() {
    let d = 4;
    for p in 1..=4 {
        for m in 1..=8 {
            for (p2p, dp_v, emb_v) in [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (1.7, 3.0, 2.0), (3.0, 1.0, 0.5)] {
                let cost = cost_with(p2p, dp_v, emb_v);
                let t = build_1f1b(&config(p, m, d), &cost);
                t.validate().unwrap();
                let emb = if p == 1 {
                    2.0 * emb_v * 0.75
                } else {
                    emb_v * (3.0 * d as f64 - 2.0) / d as f64
                };
                let expect = oracle_makespan(p, m, 1.0, 2.0, p2p, p2p, 2.0 * dp_v * 0.75, emb);
                assert!(
                    (t.makespan - expect).abs() < 1e-9,
                    "P={p} M={m} p2p={p2p}: sim {} oracle {expect}",
                    t.makespan
                );
            }
        }
    }
}

#[test]
fn zero_comm_closed_form() {
    for p in 1..=4 {
        for m in 1..=8 {
            let t = build_1f1b(&config(p, m, 1), &CostModel::compute_only(1.0, 2.0));
            assert_eq!(t.makespan, ((m + p - 1) * 3) as f64);
        }
    }
}

#[test]
fn in_flight_bound_holds_in_timeline() {
    let t = build_1f1b(&config(4, 8, 1), &cost_with(0.4, 0.0, 0.0));
    for s in 0..4 {
        let mut outstanding = 0i64;
        for e in t.lane(s) {
            match e.kind {
                EventKind::Fwd => outstanding += 1,
                EventKind::Bwd => outstanding -= 1,
                _ => {}
            }
            assert!(outstanding <= (4 - s) as i64);
        }
    }
}

/// Longest path through the timeline's predecessor DAG.
fn longest_path(t: &Timeline) -> f64 {
    let mut order: Vec<usize> = (0..t.events.len()).collect();
    order.sort_by(|&a, &b| t.events[a].start.total_cmp(&t.events[b].start).then(a.cmp(&b)));
    let mut best = vec![0.0_f64; t.events.len()];
    for &id in &order {
        let e = &t.events[id];
        let before = e.predecessors.iter().map(|&p| best[p]).fold(0.0, f64::max);
        best[id] = before + e.duration();
    }
    best.into_iter().fold(0.0, f64::max)
}

#[test]
fn critical_path_single_stage() {
    let t = build_1f1b(&config(1, 3, 1), &CostModel::compute_only(1.0, 2.0));
    let chain = critical_path(&t);
    let lane: Vec<usize> = t.lane(0).iter().map(|e| e.id).collect();
    assert_eq!(chain, lane);
}

#[test]
fn critical_path_zero_comm_has_no_comm() {
    let t = build_1f1b(&config(4, 8, 4), &CostModel::compute_only(1.0, 2.0));
    let chain = critical_path(&t);
    assert!(chain.iter().all(|&id| t.event(id).kind.is_compute()));
    let total: f64 = chain.iter().map(|&id| t.event(id).duration()).sum();
    assert_eq!(total, t.makespan);
}

#[test]
fn critical_path_with_comm_is_longest() {
    let t = build_1f1b(&config(4, 8, 1), &cost_with(0.5, 0.0, 0.0));
    let chain = critical_path(&t);
    let total: f64 = chain.iter().map(|&id| t.event(id).duration()).sum();
    assert!((total - longest_path(&t)).abs() < 1e-9);
    assert!((total - t.makespan).abs() < 1e-9);
    for w in chain.windows(2) {
        assert!(t.event(w[0]).end <= t.event(w[1]).start + 1e-12);
    }
    // Zero slack along the chain.
    for w in chain.windows(2) {
        assert!((t.event(w[1]).start - t.event(w[0]).end).abs() < 1e-9);
    }
    let late_sends: Vec<_> = chain
        .iter()
        .map(|&id| t.event(id))
        .filter(|e| e.kind == EventKind::P2pBwd)
        .collect();
    assert!(!late_sends.is_empty());
    assert!(late_sends.iter().any(|e| e.microbatch == Some(7)));
}

/// Slack oracle: a backward send is epilogue when its receiver's backward
/// starts the moment it lands.
fn slack_epilogue(t: &Timeline) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for send in t.of_kind(EventKind::P2pBwd) {
        let recv = send.peer.unwrap();
        let lane = t.lane(recv);
        let pos = lane
            .iter()
            .position(|e| e.kind == EventKind::Bwd && e.microbatch == send.microbatch)
            .unwrap();
        let slack = lane[pos].start - send.end;
        if send.duration() > 0.0 && slack.abs() < 1e-9 {
            out.insert(send.id);
        }
    }
    out
}

#[test]
fn epilogue_empty_without_comm() {
    let t = build_1f1b(&config(4, 8, 1), &CostModel::compute_only(1.0, 2.0));
    assert!(epilogue_set(&t).is_empty());
}

#[test]
fn epilogue_two_stage_hand_case() {
    // B0 lands on stage 0 at 5.0 while it has idled since 2.0; B1 lands at
    // 8.0 after B0 finished at 7.0. Both gate stage 0.
    let t = build_1f1b(&config(2, 2, 1), &cost_with(0.5, 0.0, 0.0));
    let set = epilogue_set(&t);
    assert_eq!(set, slack_epilogue(&t));
    let mbs: Vec<usize> = set.iter().map(|&id| t.event(id).microbatch.unwrap()).collect();
    assert_eq!(mbs, vec![0, 1]);
}

#[test]
fn epilogue_includes_cooldown_send() {
    let t = build_1f1b(&config(2, 6, 1), &cost_with(0.5, 0.0, 0.0));
    let set = epilogue_set(&t);
    assert_eq!(set, slack_epilogue(&t));
    let mbs: Vec<usize> = set.iter().map(|&id| t.event(id).microbatch.unwrap()).collect();
    // With two stages the latency sits on the steady-state ping-pong too;
    // the cooldown send gates in any case.
    assert!(mbs.contains(&5));
}

#[test]
fn epilogue_matches_slack_oracle_on_grid() {
    for p in 2..=4 {
        for m in 1..=8 {
            for c in [0.2, 0.7, 1.3, 1.9, 2.5] {
                let t = build_1f1b(&config(p, m, 1), &cost_with(c, 0.0, 0.0));
                assert_eq!(epilogue_set(&t), slack_epilogue(&t), "P={p} M={m} c={c}");
            }
        }
    }
}

#[test]
fn slow_links_make_every_send_epilogue() {
    for p in 2..=4 {
        for m in 1..=8 {
            for c in [2.0, 2.5, 4.0] {
                let t = build_1f1b(&config(p, m, 1), &cost_with(c, 0.0, 0.0));
                let all: BTreeSet<usize> = t.of_kind(EventKind::P2pBwd).map(|e| e.id).collect();
                assert_eq!(epilogue_set(&t), all, "P={p} M={m} c={c}");
            }
        }
    }
}

#[test]
fn epilogue_only_matches_all_links_when_comm_below_backward() {
    let cb_all = Policy {
        cb_enabled: true,
        cb_epilogue_only: false,
        ..Policy::baseline()
    };
    let cb_epi = Policy {
        cb_epilogue_only: true,
        ..cb_all.clone()
    };
    for p in 2..=4 {
        for m in 1..=8 {
            for c in [0.3, 0.9, 1.5, 1.99] {
                let cost = cost_with(c, 1.0, 1.0);
                let all = simulate(&config(p, m, 4), &cost, &cb_all);
                let epi = simulate(&config(p, m, 4), &cost, &cb_epi);
                assert_eq!(all.makespan, epi.makespan, "P={p} M={m} c={c}");
                assert!(epi.compressed_sends.len() <= all.compressed_sends.len());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedules_are_valid_and_deterministic(
        p in 1usize..6, m in 1usize..10, d in 1usize..9,
        f in 0.1f64..3.0, bratio in 0.5f64..3.0,
        act in 0.0f64..5.0, dpv in 0.0f64..20.0, embv in 0.0f64..10.0,
        cb in any::<bool>(), fe in any::<bool>(), sc in any::<bool>(), epi in any::<bool>(),
    ) {
        let cost = CostModel {
            bwd_time: Some(f * bratio),
            activation_volume: act,
            grad_volume_per_stage: dpv,
            embedding_volume: embv,
            compress_throughput: Some(50.0),
            decompress_throughput: Some(80.0),
            ..CostModel::compute_only(f, f)
        };
        let policy = Policy { cb_enabled: cb, cb_epilogue_only: epi, fe_enabled: fe, sc_enabled: sc, ..Policy::baseline() };
        let a = simulate(&config(p, m, d), &cost, &policy);
        prop_assert!(a.timeline.validate().is_ok());
        let b = simulate(&config(p, m, d), &cost, &policy);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shrinking_volumes_never_hurts(
        p in 1usize..5, m in 1usize..9,
        act in 0.0f64..4.0, dpv in 0.0f64..20.0, embv in 0.0f64..10.0,
        shrink in 0.0f64..1.0, which in 0usize..3,
    ) {
        let cost = CostModel {
            activation_volume: act,
            grad_volume_per_stage: dpv,
            embedding_volume: embv,
            ..CostModel::compute_only(1.0, 2.0)
        };
        let mut smaller = cost.clone();
        match which {
            0 => smaller.activation_volume *= shrink,
            1 => smaller.grad_volume_per_stage *= shrink,
            _ => smaller.embedding_volume *= shrink,
        }
        let before = build_1f1b(&config(p, m, 4), &cost).makespan;
        let after = build_1f1b(&config(p, m, 4), &smaller).makespan;
        prop_assert!(after <= before + 1e-12);
    }
}
