use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::analysis::epilogue_sends;
use super::engine::{schedule, Plan};
use super::{CostModel, ParallelConfig, Policy, Timeline};

/// Uncompressed 1F1B iteration.
pub fn build_1f1b(config: &ParallelConfig, cost: &CostModel) -> Timeline {
    schedule(config, cost, &Plan::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub timeline: Timeline,
    pub makespan: f64,
    /// `(sender stage, micro-batch)` of every compressed backward transfer.
    pub compressed_sends: BTreeSet<(usize, usize)>,
    /// Stages whose data-parallel gradients were compressed.
    pub compressed_stages: BTreeSet<usize>,
}

fn all_backward_sends(config: &ParallelConfig) -> BTreeSet<(usize, usize)> {
    (1..config.pipeline_stages)
        .flat_map(|s| (0..config.microbatches).map(move |i| (s, i)))
        .collect()
}

/// Backward transfers to compress under `policy`.
///
/// In epilogue-only mode the epilogue is recomputed after each round of
/// compression, since shortening one transfer can expose another, until no
/// uncompressed transfer gates its receiver.
fn compressed_sends(config: &ParallelConfig, cost: &CostModel, policy: &Policy) -> BTreeSet<(usize, usize)> {
    if !policy.cb_enabled || config.pipeline_stages < 2 {
        return BTreeSet::new();
    }
    if !policy.cb_epilogue_only {
        return all_backward_sends(config);
    }
    let mut plan = Plan {
        fused_embedding: policy.fe_enabled,
        emb_order: policy.emb_sync_order,
        ..Plan::default()
    };
    loop {
        let t = schedule(config, cost, &plan);
        let before = plan.compressed_bwd.len();
        plan.compressed_bwd.extend(epilogue_sends(&t));
        if plan.compressed_bwd.len() == before {
            return plan.compressed_bwd;
        }
    }
}

fn stage_quota(fraction: f64, stages: usize) -> usize {
    // Guard against 0.3 * 10 = 3.0000000000000004 style rounding.
    ((fraction * stages as f64 - 1e-9).ceil().max(0.0) as usize).min(stages)
}

fn select_with(config: &ParallelConfig, cost: &CostModel, policy: &Policy, base: &Plan) -> BTreeSet<usize> {
    if !policy.sc_enabled {
        return BTreeSet::new();
    }
    let stages = config.pipeline_stages;
    let quota = if policy.sc_auto {
        stages
    } else {
        stage_quota(policy.sc_fraction, stages)
    };
    let mut plan = base.clone();
    let mut current = schedule(config, cost, &plan);
    while plan.dp_compressed.len() < quota {
        // Stage whose all-reduce finishes last; lower index wins ties.
        let Some(next) = (0..stages)
            .filter(|s| !plan.dp_compressed.contains(s))
            .max_by(|&a, &b| {
                let ea = current.dp_end(a).unwrap_or(0.0);
                let eb = current.dp_end(b).unwrap_or(0.0);
                ea.total_cmp(&eb).then(b.cmp(&a))
            })
        else {
            break;
        };
        let mut trial = plan.clone();
        trial.dp_compressed.insert(next);
        let t = schedule(config, cost, &trial);
        if policy.sc_auto && t.makespan >= current.makespan {
            break;
        }
        plan = trial;
        current = t;
    }
    plan.dp_compressed
}

/// Greedy selective stage compression: keep compressing the stage whose
/// data-parallel all-reduce currently finishes last.
pub fn select_stages(config: &ParallelConfig, cost: &CostModel, policy: &Policy) -> BTreeSet<usize> {
    let base = Plan {
        compressed_bwd: compressed_sends(config, cost, policy),
        fused_embedding: policy.fe_enabled,
        emb_order: policy.emb_sync_order,
        ..Plan::default()
    };
    select_with(config, cost, policy, &base)
}

pub fn simulate(config: &ParallelConfig, cost: &CostModel, policy: &Policy) -> Simulation {
    let mut plan = Plan {
        compressed_bwd: compressed_sends(config, cost, policy),
        fused_embedding: policy.fe_enabled,
        emb_order: policy.emb_sync_order,
        ..Plan::default()
    };
    plan.dp_compressed = select_with(config, cost, policy, &plan);
    let timeline = schedule(config, cost, &plan);
    Simulation {
        makespan: timeline.makespan,
        timeline,
        compressed_sends: plan.compressed_bwd,
        compressed_stages: plan.dp_compressed,
    }
}

/// Communication classes toggled by [`breakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommClass {
    P2p,
    DpAllreduce,
    EmbSync,
}

impl CommClass {
    pub const ALL: [CommClass; 3] = [CommClass::P2p, CommClass::DpAllreduce, CommClass::EmbSync];

    pub fn as_str(self) -> &'static str {
        match self {
            CommClass::P2p => "P2P",
            CommClass::DpAllreduce => "DP_ALLREDUCE",
            CommClass::EmbSync => "EMB_SYNC",
        }
    }

    /// Copy of `cost` with this class's traffic removed.
    pub fn zeroed(self, cost: &CostModel) -> CostModel {
        let mut c = cost.clone();
        match self {
            CommClass::P2p => c.activation_volume = 0.0,
            CommClass::DpAllreduce => c.grad_volume_per_stage = 0.0,
            CommClass::EmbSync => c.embedding_volume = 0.0,
        }
        c
    }
}

/// Exposed time per communication class, each measured by removing that
/// class alone. The parts need not add up to `total_exposed` because classes
/// can hide behind one another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub makespan: f64,
    /// Makespan with every class removed.
    pub compute_only_makespan: f64,
    pub exposed: Vec<(CommClass, f64)>,
}

impl Breakdown {
    pub fn exposed(&self, class: CommClass) -> f64 {
        self.exposed
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, v)| *v)
            .unwrap_or(0.0)
    }

    pub fn total_exposed(&self) -> f64 {
        self.makespan - self.compute_only_makespan
    }
}

pub fn breakdown(config: &ParallelConfig, cost: &CostModel, policy: &Policy) -> Breakdown {
    let makespan = simulate(config, cost, policy).makespan;
    let exposed = CommClass::ALL
        .iter()
        .map(|&c| (c, makespan - simulate(config, &c.zeroed(cost), policy).makespan))
        .collect();
    let silent = CommClass::ALL.iter().fold(cost.clone(), |acc, c| c.zeroed(&acc));
    Breakdown {
        makespan,
        compute_only_makespan: simulate(config, &silent, policy).makespan,
        exposed,
    }
}

/// The four cumulative policy columns: baseline, +CB, +FE, +SC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "cb")]
    Cb,
    #[serde(rename = "cb+fe")]
    CbFe,
    #[serde(rename = "cb+fe+sc")]
    CbFeSc,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Cb, Ablation::CbFe, Ablation::CbFeSc];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Cb => "cb",
            Ablation::CbFe => "cb+fe",
            Ablation::CbFeSc => "cb+fe+sc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// `base` with the technique switches set for this column; the remaining
    /// knobs (epilogue-only, stage fraction, ordering) are kept.
    pub fn policy(self, base: &Policy) -> Policy {
        let (cb, fe, sc) = match self {
            Ablation::Baseline => (false, false, false),
            Ablation::Cb => (true, false, false),
            Ablation::CbFe => (true, true, false),
            Ablation::CbFeSc => (true, true, true),
        };
        Policy {
            cb_enabled: cb,
            fe_enabled: fe,
            sc_enabled: sc,
            ..base.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_rounding() {
        assert_eq!(stage_quota(0.0, 4), 0);
        assert_eq!(stage_quota(0.75, 4), 3);
        assert_eq!(stage_quota(0.3, 10), 3);
        assert_eq!(stage_quota(0.26, 4), 2);
        assert_eq!(stage_quota(1.0, 4), 4);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
        assert_eq!(Ablation::parse("fe"), None);
    }
}
