//! Experiment configuration.
//!
//! Configs are TOML. Every table rejects unknown keys, so a typo fails the
//! load instead of silently falling back to a default. The schema is
//! documented in `docs/config.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineCoefficients;
use crate::prefill_alloc::AllocMode;
use crate::prefix_cache::PrefixCache;
use crate::types::Tokens;
use crate::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{}{key}: {reason}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        key: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            line: None,
            reason: reason.into(),
        }
    }
}

/// Which prefill scheduler drives dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Staggered batch scheduling: adaptive interval plus batch allocation.
    #[default]
    Sbs,
    /// Dispatch on arrival to the rotation-next instance's rotation-next DP.
    Immediate,
    /// Dispatch on arrival, rotating over every DP unit in order.
    RoundRobin,
    /// Dispatch on arrival to the DP with the fewest outstanding tokens.
    LeastOutstanding,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Sbs,
        SchedulerKind::Immediate,
        SchedulerKind::RoundRobin,
        SchedulerKind::LeastOutstanding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::Sbs => "sbs",
            SchedulerKind::Immediate => "immediate",
            SchedulerKind::RoundRobin => "round_robin",
            SchedulerKind::LeastOutstanding => "least_outstanding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Which decode allocator places requests on decode DP units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodePolicy {
    /// IQR outlier mask then lexicographic `<B, K>` minimum.
    #[default]
    IqrLex,
    /// Uniformly random unit.
    Random,
    RoundRobin,
}

impl DecodePolicy {
    pub fn name(self) -> &'static str {
        match self {
            DecodePolicy::IqrLex => "iqr_lex",
            DecodePolicy::Random => "random",
            DecodePolicy::RoundRobin => "round_robin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Prefill pool then decode pool.
    #[default]
    Full,
    /// Requests finish at their first token.
    PrefillOnly,
    /// Requests enter the decode pool directly.
    DecodeOnly,
}

/// Sort key for decode batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeSortKey {
    /// prompt + output length.
    #[default]
    Total,
    /// prompt length only, for when output length is unknown at admission.
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default)]
    pub probe_lengths: Vec<Tokens>,
    #[serde(default)]
    pub budget_tokens: Tokens,
}

impl CacheConfig {
    pub fn build(&self) -> PrefixCache {
        PrefixCache::new(&self.probe_lengths, self.budget_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_instances_prefill: usize,
    pub n_instances_decode: usize,
    /// DP units per prefill instance.
    pub dp_degree: usize,
    /// DP units per decode instance; defaults to `dp_degree`.
    pub decode_dp_degree: Option<usize>,
    /// Prefill tokens per DP per forward pass.
    pub c_chunk: Tokens,
    /// Initial smoothed forward time, seconds.
    pub t_default: f64,
    pub w_size: usize,
    /// Scheduler-to-instance network latency, seconds.
    pub l_net: f64,
    /// Deferrals tolerated before flow control rejects a request.
    pub n_limit: u32,
    pub iqr_k: f64,
    pub watchdog_multiplier: f64,
    pub prefill_mode: AllocMode,
    pub decode_sort_key: DecodeSortKey,
    /// Output tokens each resident request gains per decode step.
    pub tokens_per_step: Tokens,
    /// Prefill engines keep cycling empty passes once started.
    pub free_running: bool,
    pub engine: EngineCoefficients,
    pub cache: CacheConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_instances_prefill: 3,
            n_instances_decode: 1,
            dp_degree: 8,
            decode_dp_degree: None,
            c_chunk: 3000,
            t_default: 0.2,
            w_size: 64,
            l_net: 0.005,
            n_limit: 8,
            iqr_k: 1.5,
            watchdog_multiplier: 5.0,
            prefill_mode: AllocMode::Basic,
            decode_sort_key: DecodeSortKey::Total,
            tokens_per_step: 1,
            free_running: false,
            engine: EngineCoefficients::default(),
            cache: CacheConfig::default(),
        }
    }
}

fn finite_nonneg(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(
            key,
            format!("must be a finite non-negative number, got {v}"),
        ))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), ConfigError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be at least 1"))
    }
}

impl ClusterConfig {
    pub fn decode_dp_degree(&self) -> usize {
        self.decode_dp_degree.unwrap_or(self.dp_degree)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        at_least_one("cluster.n_instances_prefill", self.n_instances_prefill)?;
        at_least_one("cluster.n_instances_decode", self.n_instances_decode)?;
        at_least_one("cluster.dp_degree", self.dp_degree)?;
        at_least_one("cluster.decode_dp_degree", self.decode_dp_degree())?;
        at_least_one("cluster.w_size", self.w_size)?;
        if self.c_chunk < 1 {
            return Err(ConfigError::invalid("cluster.c_chunk", "must be at least 1"));
        }
        if self.tokens_per_step < 1 {
            return Err(ConfigError::invalid("cluster.tokens_per_step", "must be at least 1"));
        }
        finite_nonneg("cluster.t_default", self.t_default)?;
        if self.t_default <= 0.0 {
            return Err(ConfigError::invalid("cluster.t_default", "must be positive"));
        }
        finite_nonneg("cluster.l_net", self.l_net)?;
        if !(self.iqr_k.is_finite() && self.iqr_k > 0.0) {
            return Err(ConfigError::invalid("cluster.iqr_k", "must be positive"));
        }
        if !(self.watchdog_multiplier.is_finite() && self.watchdog_multiplier > 0.0) {
            return Err(ConfigError::invalid("cluster.watchdog_multiplier", "must be positive"));
        }
        self.engine.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Leading fraction of the arrival window excluded from steady-state metrics.
    pub warmup_fraction: f64,
    /// Extra simulated seconds after the arrival window to let work drain.
    pub drain: f64,
    /// Decode KV-band sampling period, seconds.
    pub sample_interval: f64,
    /// Write `trace.tsv` with one line per processed event.
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            warmup_fraction: 0.1,
            drain: 30.0,
            sample_interval: 0.05,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakConfig {
    /// Mean-TTFT bound, seconds. Infinite means unbounded.
    pub slo_ttft: f64,
    pub min_rate: f64,
    pub max_rate: f64,
    /// Bisection stops once the bracket is narrower than this, req/s.
    pub resolution: f64,
    /// A rate is infeasible if more than this fraction of requests is rejected
    /// or left unfinished.
    pub max_dropped_fraction: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig {
            slo_ttft: 0.8,
            min_rate: 1.0,
            max_rate: 400.0,
            resolution: 1.0,
            max_dropped_fraction: 0.01,
        }
    }
}

/// Deterministic fault injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// EndForward signals from passes ending in `[from, until)` never reach
    /// the scheduler. `instance = None` covers every prefill instance.
    SuppressEndForward {
        from: f64,
        #[serde(default)]
        until: Option<f64>,
        #[serde(default)]
        instance: Option<usize>,
    },
}

/// A health transition reported to the scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyEvent {
    pub at: f64,
    pub instance: usize,
    pub healthy: bool,
}

/// Post-run bounds; violating one makes the CLI exit with status 2.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    #[serde(default)]
    pub max_mean_ttft: Option<f64>,
    #[serde(default)]
    pub min_chunk_utilization: Option<f64>,
    #[serde(default)]
    pub max_rejected: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub decode_scheduler: DecodePolicy,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub cluster: ClusterConfig,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub peak: PeakConfig,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub topology: Vec<TopologyEvent>,
    #[serde(default)]
    pub check: Option<CheckConfig>,
}

impl ExperimentConfig {
    /// Parses and validates. Errors carry a source line when one can be found.
    pub fn from_toml_str(src: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(src).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate().map_err(|err| match err {
            ConfigError::Invalid { key, reason, .. } => ConfigError::Invalid {
                line: locate_key(src, &key),
                key,
                reason,
            },
            other => other,
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&src)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cluster.validate()?;
        self.workload.validate()?;
        let run = &self.run;
        if !(run.warmup_fraction.is_finite() && (0.0..1.0).contains(&run.warmup_fraction)) {
            return Err(ConfigError::invalid("run.warmup_fraction", "must be in [0, 1)"));
        }
        finite_nonneg("run.drain", run.drain)?;
        if !(run.sample_interval.is_finite() && run.sample_interval > 0.0) {
            return Err(ConfigError::invalid("run.sample_interval", "must be positive"));
        }
        let peak = &self.peak;
        if peak.slo_ttft.is_nan() || peak.slo_ttft <= 0.0 {
            return Err(ConfigError::invalid("peak.slo_ttft", "must be positive"));
        }
        if !(peak.min_rate.is_finite() && peak.min_rate > 0.0) {
            return Err(ConfigError::invalid("peak.min_rate", "must be positive"));
        }
        if !(peak.max_rate.is_finite() && peak.max_rate >= peak.min_rate) {
            return Err(ConfigError::invalid("peak.max_rate", "must be finite and >= min_rate"));
        }
        if !(peak.resolution.is_finite() && peak.resolution > 0.0) {
            return Err(ConfigError::invalid("peak.resolution", "must be positive"));
        }
        finite_nonneg("peak.max_dropped_fraction", peak.max_dropped_fraction)?;
        for fault in &self.faults {
            match *fault {
                Fault::SuppressEndForward { from, until, instance } => {
                    finite_nonneg("faults.from", from)?;
                    if let Some(u) = until {
                        if !(u.is_finite() && u >= from) {
                            return Err(ConfigError::invalid("faults.until", "must be >= from"));
                        }
                    }
                    if let Some(i) = instance {
                        if i >= self.cluster.n_instances_prefill {
                            return Err(ConfigError::invalid("faults.instance", "no such prefill instance"));
                        }
                    }
                }
            }
        }
        if let Some(check) = &self.check {
            if let Some(t) = check.max_mean_ttft {
                if t.is_nan() || t <= 0.0 {
                    return Err(ConfigError::invalid("check.max_mean_ttft", "must be positive"));
                }
            }
            if let Some(u) = check.min_chunk_utilization {
                if !(0.0..=1.0).contains(&u) {
                    return Err(ConfigError::invalid("check.min_chunk_utilization", "must be in [0, 1]"));
                }
            }
        }
        for ev in &self.topology {
            finite_nonneg("topology.at", ev.at)?;
            if ev.instance >= self.cluster.n_instances_prefill {
                return Err(ConfigError::invalid("topology.instance", "no such prefill instance"));
            }
        }
        Ok(())
    }
}

/// Best-effort line number (1-based) of a dotted key such as
/// `cluster.engine.prefill_base` or `workload.arrival.rate`.
pub fn locate_key(src: &str, dotted: &str) -> Option<usize> {
    let parts: Vec<&str> = dotted.split('.').collect();
    let mut table = String::new();
    let mut fallback = None;
    for (idx, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            table = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else {
            continue;
        };
        let lhs = lhs.trim();
        // Try every split of the dotted path into table prefix + key.
        for split in (0..parts.len()).rev() {
            let (tab, rest) = parts.split_at(split);
            if tab.join(".") != table || rest.is_empty() {
                continue;
            }
            if lhs == rest.join(".") {
                return Some(idx + 1);
            }
            if lhs == rest[0] && fallback.is_none() {
                fallback = Some(idx + 1);
            }
        }
    }
    fallback
}
