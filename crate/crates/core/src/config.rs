//! JSON experiment configuration shared by the command-line driver and the
//! acceptance tests.
//!
//! Parsing is strict: unknown keys are rejected and every error carries the
//! dotted key path and, where one exists, the line and column in the source.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::lowrank_ratio;
use crate::pipesim::{CostModel, ParallelConfig, Policy};
use crate::testbed::TestbedConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub parallel: ParallelConfig,
    pub cost: CostModel,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub testbed: TestbedConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Values for each sweep axis. Axes left empty cannot be swept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pipeline_stages: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rank: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sc_fraction: Vec<f64>,
    /// Inter-node bandwidth, bytes per second.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bandwidth: Vec<f64>,
    /// `[rows, cols]` of the inter-stage gradient the rank axis compresses.
    /// Defaults to the testbed boundary shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_shape: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PipelineStages,
    Rank,
    ScFraction,
    Bandwidth,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::PipelineStages,
        SweepAxis::Rank,
        SweepAxis::ScFraction,
        SweepAxis::Bandwidth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PipelineStages => "pipeline_stages",
            SweepAxis::Rank => "rank",
            SweepAxis::ScFraction => "sc_fraction",
            SweepAxis::Bandwidth => "bandwidth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// One simulator input produced by a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
    pub parallel: ParallelConfig,
    pub cost: CostModel,
    pub policy: Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigErrorKind {
    Io,
    /// Malformed JSON, missing or unknown keys, wrong types.
    Schema,
    /// Well-formed but out of range.
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub kind: ConfigErrorKind,
    pub source_name: String,
    /// Dotted key path, when known.
    pub key: Option<String>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source_name)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
            if let Some(col) = self.column {
                write!(f, ":{col}")?;
            }
        }
        write!(f, ": ")?;
        if let Some(key) = self.key.as_deref().filter(|k| !k.is_empty() && *k != ".") {
            write!(f, "{key}: ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    /// Parses and validates `text`; `source_name` labels error messages.
    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError {
                kind: ConfigErrorKind::Schema,
                source_name: source_name.to_string(),
                key: Some(path),
                line: Some(inner.line()).filter(|&l| l > 0),
                column: Some(inner.column()).filter(|&c| c > 0),
                message: strip_position(&inner.to_string()),
            }
        })?;
        config.validate().map_err(|(key, message)| {
            let (line, column) = locate_key(text, &key).unzip();
            ConfigError {
                kind: ConfigErrorKind::Invalid,
                source_name: source_name.to_string(),
                key: Some(key),
                line,
                column,
                message,
            }
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            kind: ConfigErrorKind::Io,
            source_name: name.clone(),
            key: None,
            line: None,
            column: None,
            message: e.to_string(),
        })?;
        Self::from_json_str(&text, &name)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every sub-configuration; the error is `(dotted key, message)`.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.scenario.trim().is_empty() {
            return Err(("scenario".into(), "must not be empty".into()));
        }
        let tag = |section: &str, e: crate::Error| {
            let msg = e.to_string();
            let msg = msg.strip_prefix("invalid argument: ").unwrap_or(&msg).to_string();
            let key = msg
                .split_whitespace()
                .next()
                .map(|w| w.trim_end_matches(':'))
                .filter(|w| w.chars().all(|c| c.is_ascii_lowercase() || c == '_' || c == '.'))
                .map(|w| {
                    if w.contains('.') {
                        w.to_string()
                    } else {
                        format!("{section}.{w}")
                    }
                })
                .unwrap_or_else(|| section.to_string());
            (key, msg)
        };
        self.parallel.validate().map_err(|e| tag("parallel", e))?;
        self.cost.validate().map_err(|e| tag("cost", e))?;
        self.policy.validate().map_err(|e| tag("policy", e))?;
        self.testbed.validate().map_err(|e| tag("testbed", e))?;
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
        }
        Ok(())
    }

    /// `self` with the testbed seed replaced.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.testbed.seed = seed;
        self
    }

    /// Simulator inputs for every value on `axis`, in configured order.
    ///
    /// The pipeline-stage axis keeps the model fixed: per-stage compute time
    /// and data-parallel volume scale with `P₀/P`. The rank axis sets the
    /// inter-stage compression ratio to `nm / (r(n+m))` on the boundary shape.
    pub fn sweep_points(&self, axis: SweepAxis, policy: &Policy) -> Vec<SweepPoint> {
        let Some(sweep) = &self.sweep else {
            return Vec::new();
        };
        let point = |value: f64, parallel: ParallelConfig, cost: CostModel, policy: Policy| SweepPoint {
            axis,
            value,
            parallel,
            cost,
            policy,
        };
        match axis {
            SweepAxis::PipelineStages => sweep
                .pipeline_stages
                .iter()
                .map(|&p| {
                    let scale = self.parallel.pipeline_stages as f64 / p as f64;
                    let parallel = ParallelConfig {
                        pipeline_stages: p,
                        ..self.parallel.clone()
                    };
                    let cost = CostModel {
                        fwd_time: self.cost.fwd_time * scale,
                        bwd_time: self.cost.bwd_time.map(|b| b * scale),
                        grad_volume_per_stage: self.cost.grad_volume_per_stage * scale,
                        ..self.cost.clone()
                    };
                    point(p as f64, parallel, cost, policy.clone())
                })
                .collect(),
            SweepAxis::Rank => {
                let [rows, cols] = sweep.boundary_shape.unwrap_or([
                    self.testbed.microbatch_size * self.testbed.seq_len,
                    self.testbed.hidden_dim,
                ]);
                sweep
                    .rank
                    .iter()
                    .map(|&r| {
                        let cost = CostModel {
                            compression_ratio_cb: lowrank_ratio(rows, cols, r),
                            ..self.cost.clone()
                        };
                        point(r as f64, self.parallel.clone(), cost, policy.clone())
                    })
                    .collect()
            }
            SweepAxis::ScFraction => sweep
                .sc_fraction
                .iter()
                .map(|&f| {
                    let policy = Policy {
                        sc_fraction: f,
                        ..policy.clone()
                    };
                    point(f, self.parallel.clone(), self.cost.clone(), policy)
                })
                .collect(),
            SweepAxis::Bandwidth => sweep
                .bandwidth
                .iter()
                .map(|&bw| {
                    let cost = CostModel {
                        inter_node_bandwidth: bw,
                        ..self.cost.clone()
                    };
                    point(bw, self.parallel.clone(), cost, policy.clone())
                })
                .collect(),
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<(), (String, String)> {
        if let Some(p) = self.pipeline_stages.iter().find(|&&p| p == 0) {
            return Err(("sweep.pipeline_stages".into(), format!("stage count {p} must be >= 1")));
        }
        if self.rank.contains(&0) {
            return Err(("sweep.rank".into(), "rank must be >= 1".into()));
        }
        if let Some(f) = self.sc_fraction.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(("sweep.sc_fraction".into(), format!("{f} is outside [0, 1]")));
        }
        if let Some(b) = self.bandwidth.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(("sweep.bandwidth".into(), format!("{b} must be finite and > 0")));
        }
        if let Some([r, c]) = self.boundary_shape {
            if r == 0 || c == 0 {
                return Err(("sweep.boundary_shape".into(), "dimensions must be positive".into()));
            }
        }
        Ok(())
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Position of the last path component of `key` as an object key in `text`,
/// searched after the position of each enclosing component.
fn locate_key(text: &str, key: &str) -> Option<(usize, usize)> {
    let mut from = 0;
    for part in key.split('.') {
        let needle = format!("\"{part}\"");
        from += text[from..].find(&needle)?;
    }
    let before = &text[..from];
    let line = before.matches('\n').count() + 1;
    let column = from - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    Some((line, column))
}
