//! Domain types shared by every scheduler and the simulator.
//!
//! The schedulable unit is a DP-attention unit inside an instance. Each unit
//! exposes the triple `<C_avail, B, K>` the schedulers read: dispatchable
//! prefill headroom, resident decode batch size and resident KV tokens.

use std::collections::VecDeque;
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::config::{ClusterConfig, ConfigError};
use crate::prefix_cache::PrefixCache;

/// Token counts.
pub type Tokens = u64;

/// Simulated instant, in integer nanoseconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime(secs_to_nanos(secs))
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    /// Nanoseconds elapsed since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, ns: u64) -> SimTime {
        SimTime(self.0.saturating_add(ns))
    }
}

impl Sub<SimTime> for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}", self.as_secs_f64())
    }
}

/// Converts seconds to integer nanoseconds, rounding to nearest. Negative and
/// NaN inputs map to zero.
pub fn secs_to_nanos(secs: f64) -> u64 {
    if secs.is_nan() || secs <= 0.0 {
        return 0;
    }
    let ns = (secs * 1e9).round();
    if ns >= u64::MAX as f64 {
        u64::MAX
    } else {
        ns as u64
    }
}

pub fn nanos_to_secs(ns: u64) -> f64 {
    ns as f64 * 1e-9
}

/// Request identifier. Assigned in arrival order; the final tie-breaker for
/// every total order in the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

pub type InstanceId = usize;

/// A DP unit address: owning instance and index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DpId {
    pub instance: InstanceId,
    pub local: usize,
}

impl DpId {
    pub const fn new(instance: InstanceId, local: usize) -> Self {
        DpId { instance, local }
    }
}

impl fmt::Display for DpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.instance, self.local)
    }
}

/// Per-phase timestamps of a request. Each is unset until the phase happens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub dispatch: Option<SimTime>,
    pub prefill_start: Option<SimTime>,
    pub first_token: Option<SimTime>,
    pub completion: Option<SimTime>,
}

impl Timestamps {
    /// `arrival <= dispatch <= prefill_start <= first_token <= completion`
    /// over the timestamps that are set.
    pub fn is_monotone(&self, arrival: SimTime) -> bool {
        let mut last = arrival;
        for t in [self.dispatch, self.prefill_start, self.first_token, self.completion]
            .into_iter()
            .flatten()
        {
            if t < last {
                return false;
            }
            last = t;
        }
        true
    }
}

/// How a request left the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    InFlight,
    Completed,
    /// Rejected by prefill flow control after exceeding the wait-cycle limit.
    Rejected,
}

/// An inference request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: SimTime,
    /// Prompt length `L(r)`, at least one token.
    pub prompt_len: Tokens,
    pub output_len: Tokens,
    /// Number of allocation cycles this request has been deferred.
    pub wait_cycles: u32,
    /// Shareable prompt prefix, used by the cache-aware allocator. May be empty.
    pub prefix_tokens: Vec<u32>,
    pub timestamps: Timestamps,
    pub outcome: Outcome,
}

impl Request {
    pub fn new(id: RequestId, arrival_time: SimTime, prompt_len: Tokens, output_len: Tokens) -> Self {
        assert!(prompt_len >= 1, "prompt_len must be at least one token");
        Request {
            id,
            arrival_time,
            prompt_len,
            output_len,
            wait_cycles: 0,
            prefix_tokens: Vec::new(),
            timestamps: Timestamps::default(),
            outcome: Outcome::InFlight,
        }
    }

    pub fn with_prefix(mut self, prefix: Vec<u32>) -> Self {
        self.prefix_tokens = prefix;
        self
    }

    /// Prompt plus expected output: the KV footprint at completion.
    pub fn total_len(&self) -> Tokens {
        self.prompt_len + self.output_len
    }
}

/// Live state of one DP unit.
///
/// Headroom is derived, never stored, so `c_avail + u_flight + r_queued ==
/// c_chunk` holds by construction at every observation point.
#[derive(Debug, Clone)]
pub struct DpUnitState {
    pub dp_id: DpId,
    c_chunk: Tokens,
    /// Tokens dispatched to this unit and still on the network.
    pub u_flight: Tokens,
    /// Tokens buffered on the device waiting for a future pass.
    pub r_queued: Tokens,
    /// Resident decode requests `B`.
    pub batch_size: u32,
    /// Resident KV tokens `K`.
    pub kv_load: Tokens,
    pub cache: PrefixCache,
}

impl DpUnitState {
    pub fn new(dp_id: DpId, c_chunk: Tokens, cache: PrefixCache) -> Self {
        DpUnitState {
            dp_id,
            c_chunk,
            u_flight: 0,
            r_queued: 0,
            batch_size: 0,
            kv_load: 0,
            cache,
        }
    }

    pub fn c_chunk(&self) -> Tokens {
        self.c_chunk
    }

    /// Dispatchable headroom `C_chunk - U_flight - R_queued`. Negative when the
    /// backlog exceeds one chunk.
    pub fn c_avail(&self) -> i64 {
        self.c_chunk as i64 - self.u_flight as i64 - self.r_queued as i64
    }

    /// Tokens dispatched or queued but not yet finished.
    pub fn outstanding(&self) -> Tokens {
        self.u_flight + self.r_queued
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prefill,
    Decode,
}

/// A prefill or decode instance and the scheduler's view of its readiness.
#[derive(Debug, Clone)]
pub struct InstanceState {
    pub instance_id: InstanceId,
    pub role: Role,
    pub dp_units: Vec<DpUnitState>,
    /// A forward pass is executing.
    pub busy: bool,
    /// Dispatches the scheduler has sent and not seen acknowledged.
    pub task_depth: u32,
    /// An EndForward has arrived since the last dispatch.
    pub acked: bool,
    pub watchdog_deadline: Option<SimTime>,
    /// Bumped whenever the watchdog is disarmed; stale expiries are ignored.
    pub watchdog_gen: u64,
    pub healthy: bool,
}

impl InstanceState {
    pub fn new(instance_id: InstanceId, role: Role, dp_units: Vec<DpUnitState>) -> Self {
        InstanceState {
            instance_id,
            role,
            dp_units,
            busy: false,
            task_depth: 0,
            acked: false,
            watchdog_deadline: None,
            watchdog_gen: 0,
            healthy: true,
        }
    }

    pub fn dp_degree(&self) -> usize {
        self.dp_units.len()
    }
}

/// Interval controller state plus the scheduler-side request queue.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    /// Sliding window of measured forward times, in ns.
    pub exec_window: VecDeque<u64>,
    pub w_size: usize,
    pub t_default: u64,
    /// Smoothed forward time, in ns.
    pub t_fwd_bar: u64,
    pub l_net: u64,
    pub n_active: usize,
    /// Current scheduling interval, in ns.
    pub i_opt: u64,
    /// Set while `n_active == 0`.
    pub suspended: bool,
    /// Requests deferred from earlier cycles, in priority order.
    pub pending: VecDeque<RequestId>,
    /// Requests that arrived since the last allocation cycle.
    pub arrivals: VecDeque<RequestId>,
}

impl SchedulerState {
    pub fn new(t_default: u64, w_size: usize, l_net: u64, n_active: usize) -> Self {
        let mut state = SchedulerState {
            exec_window: VecDeque::with_capacity(w_size),
            w_size,
            t_default,
            t_fwd_bar: t_default,
            l_net,
            n_active,
            i_opt: t_default + l_net,
            suspended: false,
            pending: VecDeque::new(),
            arrivals: VecDeque::new(),
        };
        state.recompute_interval();
        state
    }

    pub fn queued_requests(&self) -> usize {
        self.pending.len() + self.arrivals.len()
    }
}

/// Freshly built cluster: scheduler state plus prefill and decode instances.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub scheduler: SchedulerState,
    pub prefill: Vec<InstanceState>,
    pub decode: Vec<InstanceState>,
}

fn build_instances(
    role: Role,
    count: usize,
    dp_degree: usize,
    c_chunk: Tokens,
    config: &ClusterConfig,
) -> Vec<InstanceState> {
    (0..count)
        .map(|i| {
            let units = (0..dp_degree)
                .map(|d| DpUnitState::new(DpId::new(i, d), c_chunk, config.cache.build()))
                .collect();
            InstanceState::new(i, role, units)
        })
        .collect()
}

/// Builds an idle cluster: every unit at full headroom with nothing resident.
pub fn new_cluster(config: &ClusterConfig) -> Result<Cluster, ConfigError> {
    config.validate()?;
    let prefill = build_instances(
        Role::Prefill,
        config.n_instances_prefill,
        config.dp_degree,
        config.c_chunk,
        config,
    );
    let decode = build_instances(
        Role::Decode,
        config.n_instances_decode,
        config.decode_dp_degree(),
        config.c_chunk,
        config,
    );
    let scheduler = SchedulerState::new(
        secs_to_nanos(config.t_default),
        config.w_size,
        secs_to_nanos(config.l_net),
        config.n_instances_prefill,
    );
    Ok(Cluster {
        scheduler,
        prefill,
        decode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n_prefill: usize, dp: usize, chunk: Tokens) -> ClusterConfig {
        ClusterConfig {
            n_instances_prefill: n_prefill,
            dp_degree: dp,
            c_chunk: chunk,
            ..ClusterConfig::default()
        }
    }

    #[test]
    fn new_cluster_three_by_eight() {
        let cluster = new_cluster(&config(3, 8, 3000)).unwrap();
        assert_eq!(cluster.prefill.len(), 3);
        for inst in &cluster.prefill {
            assert_eq!(inst.dp_units.len(), 8);
            assert!(!inst.busy);
            assert_eq!(inst.task_depth, 0);
            for dp in &inst.dp_units {
                assert_eq!(dp.c_avail(), 3000);
                assert_eq!(dp.batch_size, 0);
                assert_eq!(dp.kv_load, 0);
            }
        }
        assert_eq!(
            cluster.scheduler.t_fwd_bar,
            secs_to_nanos(ClusterConfig::default().t_default)
        );
    }

    #[test]
    fn new_cluster_minimal() {
        let cluster = new_cluster(&config(1, 1, 1)).unwrap();
        assert_eq!(cluster.prefill.len(), 1);
        assert_eq!(cluster.prefill[0].dp_units.len(), 1);
        assert_eq!(cluster.prefill[0].dp_units[0].c_avail(), 1);
    }

    #[test]
    fn new_cluster_rejects_zero_chunk() {
        assert!(new_cluster(&config(1, 1, 0)).is_err());
        assert!(new_cluster(&config(0, 8, 3000)).is_err());
    }

    #[test]
    fn headroom_identity_and_negative_headroom() {
        let mut dp = DpUnitState::new(DpId::new(0, 0), 3000, PrefixCache::disabled());
        dp.u_flight = 1200;
        dp.r_queued = 2500;
        assert_eq!(dp.c_avail(), -700);
        assert_eq!(dp.c_avail() + dp.u_flight as i64 + dp.r_queued as i64, 3000);
    }

    #[test]
    fn timestamps_monotonicity() {
        let arrival = SimTime::from_nanos(10);
        let mut ts = Timestamps::default();
        assert!(ts.is_monotone(arrival));
        ts.dispatch = Some(SimTime::from_nanos(10));
        ts.first_token = Some(SimTime::from_nanos(30));
        assert!(ts.is_monotone(arrival));
        ts.prefill_start = Some(SimTime::from_nanos(40));
        assert!(!ts.is_monotone(arrival));
    }

    #[test]
    #[should_panic]
    fn zero_prompt_is_rejected() {
        let _ = Request::new(RequestId(0), SimTime::ZERO, 0, 1);
    }

    #[test]
    fn secs_round_trip() {
        assert_eq!(secs_to_nanos(0.4), 400_000_000);
        assert_eq!(secs_to_nanos(-1.0), 0);
        assert_eq!(SimTime::from_secs_f64(1.5).as_nanos(), 1_500_000_000);
    }
}
