//! Discrete-event simulation of one 3D-parallel training iteration.
//!
//! Each pipeline stage executes a non-interleaved 1F1B sequence on its
//! compute lane. Point-to-point activations and gradients travel over one
//! serial channel per direction and stage pair; data-parallel all-reduces and
//! the embedding synchronization run on their own channels. Tensor
//! parallelism is intra-node and modeled as free.

mod analysis;
mod cost;
mod engine;
mod export;
mod policy;

pub use analysis::{critical_path, epilogue_set};
pub use cost::{allreduce_time, embedding_sync_time};
pub use engine::one_f_one_b_order;
pub use export::{breakdown_csv, chrome_trace, write_breakdown_csv, write_chrome_trace};
pub use policy::{breakdown, build_1f1b, select_stages, simulate, Ablation, Breakdown, CommClass, Simulation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub tensor_ways: usize,
    pub data_ways: usize,
    pub pipeline_stages: usize,
    /// Micro-batches per iteration on each pipeline (M).
    pub microbatches: usize,
    /// Samples per micro-batch (n).
    pub microbatch_size: usize,
    /// Optional cross-check of N = M·n·D.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch_size: Option<usize>,
}

impl ParallelConfig {
    pub fn new(tensor_ways: usize, data_ways: usize, pipeline_stages: usize, microbatches: usize) -> Self {
        Self {
            tensor_ways,
            data_ways,
            pipeline_stages,
            microbatches,
            microbatch_size: 1,
            minibatch_size: None,
        }
    }

    /// N = M·n·D samples.
    pub fn total_minibatch(&self) -> usize {
        self.microbatches * self.microbatch_size * self.data_ways
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tensor_ways", self.tensor_ways),
            ("data_ways", self.data_ways),
            ("pipeline_stages", self.pipeline_stages),
            ("microbatches", self.microbatches),
            ("microbatch_size", self.microbatch_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if let Some(n) = self.minibatch_size {
            if n != self.total_minibatch() {
                return Err(Error::InvalidArgument(format!(
                    "minibatch_size {n} != microbatches*microbatch_size*data_ways = {}",
                    self.total_minibatch()
                )));
            }
        }
        Ok(())
    }
}

/// Compute times, link bandwidth and message volumes. Times are seconds,
/// volumes bytes, rates bytes per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Forward time of one micro-batch on one stage.
    pub fwd_time: f64,
    /// Backward time; defaults to twice the forward time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bwd_time: Option<f64>,
    pub inter_node_bandwidth: f64,
    /// Bytes per micro-batch crossing one stage boundary, either direction.
    pub activation_volume: f64,
    /// Data-parallel gradient bytes per stage.
    pub grad_volume_per_stage: f64,
    /// Bytes of the tied embedding table's gradient.
    pub embedding_volume: f64,
    /// `None` models free compression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compress_throughput: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompress_throughput: Option<f64>,
    pub compression_ratio_cb: f64,
    pub compression_ratio_dp: f64,
}

impl CostModel {
    /// Uniform stages with free compression and no communication volume.
    pub fn compute_only(fwd_time: f64, bwd_time: f64) -> Self {
        Self {
            fwd_time,
            bwd_time: Some(bwd_time),
            inter_node_bandwidth: 1.0,
            activation_volume: 0.0,
            grad_volume_per_stage: 0.0,
            embedding_volume: 0.0,
            compress_throughput: None,
            decompress_throughput: None,
            compression_ratio_cb: 10.0,
            compression_ratio_dp: 10.0,
        }
    }

    pub fn bwd(&self) -> f64 {
        self.bwd_time.unwrap_or(2.0 * self.fwd_time)
    }

    /// Uncompressed time of one point-to-point transfer.
    pub fn p2p_time(&self) -> f64 {
        self.activation_volume / self.inter_node_bandwidth
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("fwd_time", self.fwd_time),
            ("bwd_time", self.bwd()),
            ("activation_volume", self.activation_volume),
            ("grad_volume_per_stage", self.grad_volume_per_stage),
            ("embedding_volume", self.embedding_volume),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        let positive = [
            ("inter_node_bandwidth", Some(self.inter_node_bandwidth)),
            ("compress_throughput", self.compress_throughput),
            ("decompress_throughput", self.decompress_throughput),
        ];
        for (name, v) in positive {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidArgument(format!("{name} must be finite and > 0")));
                }
            }
        }
        for (name, v) in [
            ("compression_ratio_cb", self.compression_ratio_cb),
            ("compression_ratio_dp", self.compression_ratio_dp),
        ] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// When the embedding synchronization may start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbSyncOrder {
    /// After the data-parallel all-reduce of both the first and last stage.
    #[default]
    AfterDp,
    /// As soon as both stages finish their backward passes, concurrently with
    /// their data-parallel all-reduce.
    Overlap,
}

fn default_sc_fraction() -> f64 {
    0.75
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    /// Compressed backpropagation on inter-stage backward traffic.
    #[serde(default)]
    pub cb_enabled: bool,
    /// Restrict compressed backpropagation to the epilogue.
    #[serde(default = "default_true")]
    pub cb_epilogue_only: bool,
    /// Fused embedding synchronization.
    #[serde(default)]
    pub fe_enabled: bool,
    /// Selective stage compression of data-parallel traffic.
    #[serde(default)]
    pub sc_enabled: bool,
    #[serde(default = "default_sc_fraction")]
    pub sc_fraction: f64,
    /// Keep adding stages while the makespan improves, ignoring `sc_fraction`.
    #[serde(default)]
    pub sc_auto: bool,
    #[serde(default)]
    pub emb_sync_order: EmbSyncOrder,
}

impl Default for Policy {
    fn default() -> Self {
        Self::baseline()
    }
}

impl Policy {
    pub fn baseline() -> Self {
        Self {
            cb_enabled: false,
            cb_epilogue_only: true,
            fe_enabled: false,
            sc_enabled: false,
            sc_fraction: default_sc_fraction(),
            sc_auto: false,
            emb_sync_order: EmbSyncOrder::AfterDp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sc_fraction) {
            return Err(Error::InvalidArgument(format!(
                "sc_fraction must lie in [0, 1], got {}",
                self.sc_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Fwd,
    Bwd,
    P2pFwd,
    P2pBwd,
    DpAllreduce,
    EmbSync,
    Compress,
    Decompress,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Fwd => "FWD",
            EventKind::Bwd => "BWD",
            EventKind::P2pFwd => "P2P_FWD",
            EventKind::P2pBwd => "P2P_BWD",
            EventKind::DpAllreduce => "DP_ALLREDUCE",
            EventKind::EmbSync => "EMB_SYNC",
            EventKind::Compress => "COMPRESS",
            EventKind::Decompress => "DECOMPRESS",
        }
    }

    /// Occupies a stage's compute lane.
    pub fn is_compute(self) -> bool {
        matches!(
            self,
            EventKind::Fwd | EventKind::Bwd | EventKind::Compress | EventKind::Decompress
        )
    }

    pub fn is_comm(self) -> bool {
        !self.is_compute()
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type EventId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub id: EventId,
    /// Stage that executes (compute) or sends (communication) the event.
    pub device: usize,
    /// Receiving stage of a point-to-point transfer.
    pub peer: Option<usize>,
    pub kind: EventKind,
    pub microbatch: Option<usize>,
    pub start: f64,
    pub end: f64,
    /// Data dependencies plus the previous event on the same lane or channel.
    pub predecessors: Vec<EventId>,
    /// The transfer (or all-reduce) was compressed.
    pub compressed: bool,
}

impl ScheduleEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn label(&self) -> String {
        match self.microbatch {
            Some(mb) => format!("{}{}", self.kind, mb),
            None => self.kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<ScheduleEvent>,
    pub makespan: f64,
}

impl Timeline {
    pub fn event(&self, id: EventId) -> &ScheduleEvent {
        &self.events[id]
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &ScheduleEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Compute-lane events of one stage, in start order.
    pub fn lane(&self, device: usize) -> Vec<&ScheduleEvent> {
        let mut lane: Vec<_> = self
            .events
            .iter()
            .filter(|e| e.device == device && e.kind.is_compute())
            .collect();
        lane.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.id.cmp(&b.id)));
        lane
    }

    /// Finish time of the data-parallel all-reduce of `stage`.
    pub fn dp_end(&self, stage: usize) -> Option<f64> {
        self.of_kind(EventKind::DpAllreduce)
            .find(|e| e.device == stage)
            .map(|e| e.end)
    }

    /// Checks the structural invariants: ordered times, satisfied
    /// predecessors, no overlap on a compute lane, makespan == max end.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut max_end = 0.0_f64;
        let mut stages = 0;
        for e in &self.events {
            if e.end < e.start {
                return Err(format!("event {} ends before it starts", e.id));
            }
            for &p in &e.predecessors {
                if self.events[p].end > e.start {
                    return Err(format!("event {} starts before predecessor {p} ends", e.id));
                }
            }
            max_end = max_end.max(e.end);
            stages = stages.max(e.device + 1);
        }
        if max_end != self.makespan {
            return Err(format!("makespan {} != max end {max_end}", self.makespan));
        }
        for s in 0..stages {
            for w in self.lane(s).windows(2) {
                if w[1].start < w[0].end {
                    return Err(format!("events {} and {} overlap on stage {s}", w[0].id, w[1].id));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minibatch_accounting() {
        let mut pc = ParallelConfig {
            tensor_ways: 8,
            data_ways: 4,
            pipeline_stages: 4,
            microbatches: 16,
            microbatch_size: 8,
            minibatch_size: Some(512),
        };
        assert_eq!(pc.total_minibatch(), 512);
        pc.validate().unwrap();
        pc.minibatch_size = Some(500);
        assert!(pc.validate().is_err());
        pc.minibatch_size = None;
        pc.pipeline_stages = 0;
        assert!(pc.validate().is_err());
    }

    #[test]
    fn backward_defaults_to_twice_forward() {
        let mut c = CostModel::compute_only(1.5, 0.0);
        c.bwd_time = None;
        assert_eq!(c.bwd(), 3.0);
    }

    #[test]
    fn cost_validation() {
        let mut c = CostModel::compute_only(1.0, 2.0);
        c.validate().unwrap();
        c.inter_node_bandwidth = 0.0;
        assert!(c.validate().is_err());
        c.inter_node_bandwidth = 1.0;
        c.compression_ratio_cb = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn policy_defaults() {
        let p: Policy = serde_json::from_str("{}").unwrap();
        assert_eq!(p, Policy::baseline());
        assert_eq!(p.sc_fraction, 0.75);
        assert!(serde_json::from_str::<Policy>(r#"{"cb": true}"#).is_err());
        let bad = Policy {
            sc_fraction: 1.5,
            ..Policy::baseline()
        };
        assert!(bad.validate().is_err());
    }
}
