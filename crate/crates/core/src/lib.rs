//! Discrete-event simulator of a prefill/decode-disaggregated inference
//! cluster with data-parallel attention units, plus the schedulers that
//! drive it.
//!
//! The batch scheduler dispatches on a staggered cadence derived from the
//! measured forward time, packs each batch onto DP units longest-first, and
//! places decode requests by lexicographic `<batch, KV>` load after masking
//! KV outliers. Arrival-driven baselines share the same engine model.

pub mod baselines;
pub mod config;
pub mod decode_alloc;
pub mod engine;
pub mod experiment;
pub mod interval;
pub mod metrics;
pub mod prefill_alloc;
pub mod prefix_cache;
pub mod sim;
pub mod simclock;
pub mod types;
pub mod workload;

pub use config::{ConfigError, ExperimentConfig, SchedulerKind};
pub use experiment::{compare, find_peak_qps, parse_load_list, parse_scheduler_list, sweep};
pub use sim::{run, RunResult, SimError, Summary};
pub use types::{Request, RequestId, SimTime, Tokens};
