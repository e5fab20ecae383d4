//! Mock inference instances.
//!
//! Prefill instances are non-preemptive gated batch servers: a pass takes up
//! to `c_chunk` tokens from every DP unit's device queue and lasts as long as
//! the most loaded unit needs. Decode instances step every resident request
//! forward together, again paced by the slowest unit.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::types::{secs_to_nanos, InstanceId, InstanceState, RequestId, SimTime, Tokens};

/// Affine cost model for both phases. All values in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineCoefficients {
    /// Fixed per-pass synchronization and kernel overhead.
    pub prefill_base: f64,
    pub prefill_per_token: f64,
    pub decode_base: f64,
    pub decode_per_request: f64,
    pub decode_per_kv_token: f64,
}

impl Default for EngineCoefficients {
    fn default() -> Self {
        EngineCoefficients {
            prefill_base: 0.03,
            prefill_per_token: 1.0e-4,
            decode_base: 0.015,
            decode_per_request: 2.0e-4,
            decode_per_kv_token: 1.0e-7,
        }
    }
}

impl EngineCoefficients {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("cluster.engine.prefill_base", self.prefill_base),
            ("cluster.engine.prefill_per_token", self.prefill_per_token),
            ("cluster.engine.decode_base", self.decode_base),
            ("cluster.engine.decode_per_request", self.decode_per_request),
            ("cluster.engine.decode_per_kv_token", self.decode_per_kv_token),
        ];
        for (key, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::invalid(key, "must be finite and non-negative"));
            }
        }
        if self.prefill_per_token <= 0.0 {
            return Err(ConfigError::invalid(
                "cluster.engine.prefill_per_token",
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("timing model needs at least one DP unit")]
    NoUnits,
}

/// Prefill pass duration: `base + per_token * max(load)`. The straggler sets
/// the pace; idle units wait.
pub fn prefill_forward_time(dp_token_loads: &[Tokens], coeff: &EngineCoefficients) -> Result<f64, EngineError> {
    let max = dp_token_loads.iter().copied().max().ok_or(EngineError::NoUnits)?;
    Ok(coeff.prefill_base + coeff.prefill_per_token * max as f64)
}

/// Decode step duration: `base + max over units of (per_req * B + per_kv * K)`.
pub fn decode_step_time(dp_states: &[(u32, Tokens)], coeff: &EngineCoefficients) -> Result<f64, EngineError> {
    let worst = dp_states
        .iter()
        .map(|&(b, k)| coeff.decode_per_request * b as f64 + coeff.decode_per_kv_token * k as f64)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
        .ok_or(EngineError::NoUnits)?;
    Ok(coeff.decode_base + worst)
}

/// Tokens of one request handed to a DP unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillWork {
    pub request: RequestId,
    /// Tokens that must actually be computed (prompt minus cache hit).
    pub tokens: Tokens,
}

#[derive(Debug, Clone, Copy)]
struct QueuedWork {
    request: RequestId,
    remaining: Tokens,
    started: bool,
}

/// A request's share of one pass on one DP unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSlice {
    pub request: RequestId,
    pub tokens: Tokens,
    /// This pass is the request's first.
    pub first: bool,
    /// This pass finishes the request's prompt.
    pub last: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassPlan {
    pub instance: InstanceId,
    pub start: SimTime,
    pub end: SimTime,
    /// Slices per DP unit.
    pub per_dp: Vec<Vec<ChunkSlice>>,
    /// Tokens per DP unit.
    pub loads: Vec<Tokens>,
}

impl PassPlan {
    pub fn duration_ns(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.loads.iter().all(|&l| l == 0)
    }
}

/// Completion signal sent to the scheduler after a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EndForwardSignal {
    pub instance: InstanceId,
    pub measured_ns: u64,
    /// Backlog per DP unit after the pass.
    pub remaining: Vec<Tokens>,
}

/// Device side of one prefill instance: per-unit FIFO queues and the pass in
/// progress. Headroom accounting lives on the [`InstanceState`] units.
#[derive(Debug, Clone)]
pub struct PrefillExecutor {
    queues: Vec<VecDeque<QueuedWork>>,
    current: Option<PassPlan>,
    /// Has run at least one pass (free-running engines never idle afterwards).
    started: bool,
}

impl PrefillExecutor {
    pub fn new(dp_degree: usize) -> Self {
        PrefillExecutor {
            queues: vec![VecDeque::new(); dp_degree],
            current: None,
            started: false,
        }
    }

    pub fn is_busy(&self) -> bool {
        self.current.is_some()
    }

    pub fn has_started(&self) -> bool {
        self.started
    }

    pub fn current(&self) -> Option<&PassPlan> {
        self.current.as_ref()
    }

    pub fn backlog(&self) -> Vec<Tokens> {
        self.queues
            .iter()
            .map(|q| q.iter().map(|w| w.remaining).sum())
            .collect()
    }

    pub fn has_backlog(&self) -> bool {
        self.queues.iter().any(|q| !q.is_empty())
    }

    /// Tokens reach the device: they leave the network (`u_flight`) and join
    /// the unit's device queue (`r_queued`).
    pub fn deliver(&mut self, inst: &mut InstanceState, items: &[(usize, PrefillWork)]) {
        for &(dp, work) in items {
            let unit = &mut inst.dp_units[dp];
            debug_assert!(unit.u_flight >= work.tokens);
            unit.u_flight -= work.tokens;
            unit.r_queued += work.tokens;
            self.queues[dp].push_back(QueuedWork {
                request: work.request,
                remaining: work.tokens,
                started: false,
            });
        }
    }

    /// Starts a gated pass if the instance is idle and there is work, or if
    /// `allow_empty` and the engine is free-running. Each unit takes up to
    /// `c_chunk` tokens from the head of its queue, splitting a request at the
    /// chunk boundary; the remainder stays queued for a later pass.
    pub fn begin_pass(
        &mut self,
        inst: &mut InstanceState,
        c_chunk: Tokens,
        coeff: &EngineCoefficients,
        now: SimTime,
        allow_empty: bool,
    ) -> Option<&PassPlan> {
        if self.current.is_some() || (!self.has_backlog() && !allow_empty) {
            return None;
        }
        let mut per_dp = Vec::with_capacity(self.queues.len());
        let mut loads = Vec::with_capacity(self.queues.len());
        for (dp, queue) in self.queues.iter_mut().enumerate() {
            let mut budget = c_chunk;
            let mut slices = Vec::new();
            while budget > 0 {
                let Some(head) = queue.front_mut() else { break };
                let take = head.remaining.min(budget);
                let first = !head.started;
                head.started = true;
                head.remaining -= take;
                budget -= take;
                let last = head.remaining == 0;
                slices.push(ChunkSlice {
                    request: head.request,
                    tokens: take,
                    first,
                    last,
                });
                if last {
                    queue.pop_front();
                }
            }
            let load = c_chunk - budget;
            inst.dp_units[dp].r_queued -= load;
            loads.push(load);
            per_dp.push(slices);
        }
        let secs = prefill_forward_time(&loads, coeff).expect("instance has DP units");
        let plan = PassPlan {
            instance: inst.instance_id,
            start: now,
            end: now + secs_to_nanos(secs),
            per_dp,
            loads,
        };
        inst.busy = true;
        self.started = true;
        self.current = Some(plan);
        self.current.as_ref()
    }

    /// Ends the pass in progress and builds its EndForward signal.
    pub fn finish_pass(&mut self, inst: &mut InstanceState) -> (PassPlan, EndForwardSignal) {
        let plan = self.current.take().expect("finish_pass without a pass in progress");
        inst.busy = false;
        let signal = EndForwardSignal {
            instance: inst.instance_id,
            measured_ns: plan.duration_ns(),
            remaining: self.backlog(),
        };
        (plan, signal)
    }
}

/// A request resident on a decode DP unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resident {
    pub request: RequestId,
    /// KV tokens this request contributes to its unit.
    pub kv: Tokens,
    /// Output tokens still to generate.
    pub remaining: Tokens,
    /// Joined after the current step began; first participates in the next.
    pub joining: bool,
}

/// What one decode step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub instance: InstanceId,
    pub start: SimTime,
    pub end: SimTime,
    /// (request, tokens generated this step)
    pub advanced: Vec<(RequestId, Tokens)>,
    pub completed: Vec<RequestId>,
}

/// Device side of one decode instance.
#[derive(Debug, Clone)]
pub struct DecodeExecutor {
    residents: Vec<Vec<Resident>>,
    step_start: Option<SimTime>,
    step_end: Option<SimTime>,
}

impl DecodeExecutor {
    pub fn new(dp_degree: usize) -> Self {
        DecodeExecutor {
            residents: vec![Vec::new(); dp_degree],
            step_start: None,
            step_end: None,
        }
    }

    pub fn is_stepping(&self) -> bool {
        self.step_end.is_some()
    }

    pub fn resident_count(&self) -> usize {
        self.residents.iter().map(Vec::len).sum()
    }

    /// Admits a request with `kv` tokens already materialized. The unit's
    /// `<B, K>` must already account for it (the allocator updates them).
    pub fn admit(&mut self, dp: usize, request: RequestId, kv: Tokens, remaining: Tokens) {
        self.residents[dp].push(Resident {
            request,
            kv,
            remaining,
            joining: self.step_end.is_some(),
        });
    }

    /// Starts a step over every resident if idle. Returns the end time.
    pub fn begin_step(&mut self, inst: &InstanceState, coeff: &EngineCoefficients, now: SimTime) -> Option<SimTime> {
        if self.step_end.is_some() || self.resident_count() == 0 {
            return None;
        }
        for unit in &mut self.residents {
            for r in unit.iter_mut() {
                r.joining = false;
            }
        }
        let states: Vec<(u32, Tokens)> = inst.dp_units.iter().map(|u| (u.batch_size, u.kv_load)).collect();
        let secs = decode_step_time(&states, coeff).expect("instance has DP units");
        let end = now + secs_to_nanos(secs).max(1);
        self.step_start = Some(now);
        self.step_end = Some(end);
        Some(end)
    }

    /// Finishes the step: every participant gains up to `tokens_per_step`
    /// tokens of KV; finished requests release `B` and their full `K`.
    pub fn finish_step(&mut self, inst: &mut InstanceState, tokens_per_step: Tokens) -> StepOutcome {
        let start = self.step_start.take().expect("finish_step without a step");
        let end = self.step_end.take().expect("finish_step without a step");
        let mut advanced = Vec::new();
        let mut completed = Vec::new();
        for (dp, unit_residents) in self.residents.iter_mut().enumerate() {
            let unit = &mut inst.dp_units[dp];
            unit_residents.retain_mut(|r| {
                if r.joining {
                    return true;
                }
                let gain = tokens_per_step.min(r.remaining);
                r.remaining -= gain;
                r.kv += gain;
                unit.kv_load += gain;
                advanced.push((r.request, gain));
                if r.remaining == 0 {
                    unit.batch_size -= 1;
                    unit.kv_load -= r.kv;
                    completed.push(r.request);
                    false
                } else {
                    true
                }
            });
        }
        StepOutcome {
            instance: inst.instance_id,
            start,
            end,
            advanced,
            completed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefix_cache::PrefixCache;
    use crate::types::{DpId, DpUnitState, Role};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn coeff(base: f64, per_token: f64) -> EngineCoefficients {
        EngineCoefficients {
            prefill_base: base,
            prefill_per_token: per_token,
            ..EngineCoefficients::default()
        }
    }

    fn instance(dp: usize, chunk: Tokens) -> InstanceState {
        let units = (0..dp)
            .map(|d| DpUnitState::new(DpId::new(0, d), chunk, PrefixCache::disabled()))
            .collect();
        InstanceState::new(0, Role::Prefill, units)
    }

    fn dispatch(inst: &mut InstanceState, dp: usize, id: u64, tokens: Tokens) -> (usize, PrefillWork) {
        inst.dp_units[dp].u_flight += tokens;
        (
            dp,
            PrefillWork {
                request: RequestId(id),
                tokens,
            },
        )
    }

    #[test]
    fn prefill_time_substitution() {
        let c = coeff(0.1, 1e-4);
        assert_relative_eq!(
            prefill_forward_time(&[3000, 3000, 3000], &c).unwrap(),
            0.4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn prefill_time_is_straggler_bound() {
        let c = coeff(0.1, 1e-4);
        let balanced = prefill_forward_time(&[3000, 3000, 3000], &c).unwrap();
        let skewed = prefill_forward_time(&[3000, 0, 0], &c).unwrap();
        assert_eq!(balanced, skewed);
    }

    #[test]
    fn prefill_time_zero_load_is_base() {
        let c = coeff(0.1, 1e-4);
        assert_eq!(prefill_forward_time(&[0, 0], &c).unwrap(), 0.1);
        assert_eq!(prefill_forward_time(&[], &c), Err(EngineError::NoUnits));
    }

    #[test]
    fn decode_time_examples() {
        let c = EngineCoefficients {
            decode_base: 0.01,
            decode_per_request: 1e-4,
            decode_per_kv_token: 1e-7,
            ..EngineCoefficients::default()
        };
        assert_relative_eq!(decode_step_time(&[(35, 87_500)], &c).unwrap(), 0.02225, epsilon = 1e-12);
        let c2 = EngineCoefficients {
            decode_base: 0.0,
            decode_per_request: 1e-3,
            decode_per_kv_token: 1e-7,
            ..EngineCoefficients::default()
        };
        assert_relative_eq!(
            decode_step_time(&[(10, 0), (0, 100_000)], &c2).unwrap(),
            0.01,
            epsilon = 1e-12
        );
        assert_eq!(decode_step_time(&[(0, 0), (0, 0)], &c).unwrap(), 0.01);
        assert_eq!(decode_step_time(&[], &c), Err(EngineError::NoUnits));
    }

    #[test]
    fn single_chunk_request() {
        let c = coeff(0.1, 1e-4);
        let mut inst = instance(1, 3000);
        let mut exec = PrefillExecutor::new(1);
        let item = dispatch(&mut inst, 0, 1, 1000);
        exec.deliver(&mut inst, &[item]);
        let plan = exec
            .begin_pass(&mut inst, 3000, &c, SimTime::ZERO, false)
            .unwrap()
            .clone();
        assert_eq!(plan.end, SimTime::from_secs_f64(0.1 + 1000.0 * 1e-4));
        assert_eq!(
            plan.per_dp[0],
            vec![ChunkSlice {
                request: RequestId(1),
                tokens: 1000,
                first: true,
                last: true
            }]
        );
        assert!(inst.busy);
        let (_, signal) = exec.finish_pass(&mut inst);
        assert_eq!(signal.remaining, vec![0]);
        assert!(!inst.busy);
    }

    #[test]
    fn long_request_takes_three_passes() {
        let c = coeff(0.1, 1e-4);
        let mut inst = instance(1, 3000);
        let mut exec = PrefillExecutor::new(1);
        let item = dispatch(&mut inst, 0, 7, 7000);
        exec.deliver(&mut inst, &[item]);
        let mut now = SimTime::ZERO;
        let mut chunks = Vec::new();
        let mut first_token = None;
        while let Some(plan) = exec.begin_pass(&mut inst, 3000, &c, now, false) {
            let plan = plan.clone();
            assert_eq!(inst.dp_units[0].c_avail(), 3000 - exec.backlog()[0] as i64);
            let slice = plan.per_dp[0][0];
            chunks.push(slice.tokens);
            now = plan.end;
            let (_, signal) = exec.finish_pass(&mut inst);
            if slice.last {
                first_token = Some(now);
            }
            assert_eq!(signal.remaining[0], 7000 - chunks.iter().sum::<u64>());
        }
        assert_eq!(chunks, vec![3000, 3000, 1000]);
        let expected = 0.4 + 0.4 + 0.2;
        assert_eq!(
            first_token,
            Some(SimTime::from_nanos(secs_to_nanos(0.4) * 2 + secs_to_nanos(0.2)))
        );
        assert_relative_eq!(now.as_secs_f64(), expected, epsilon = 1e-9);
    }

    #[test]
    fn delivery_to_busy_instance_queues_on_device() {
        let c = coeff(0.1, 1e-4);
        let mut inst = instance(1, 3000);
        let mut exec = PrefillExecutor::new(1);
        let a = dispatch(&mut inst, 0, 1, 3000);
        exec.deliver(&mut inst, &[a]);
        exec.begin_pass(&mut inst, 3000, &c, SimTime::ZERO, false).unwrap();
        let b = dispatch(&mut inst, 0, 2, 500);
        assert_eq!(inst.dp_units[0].u_flight, 500);
        exec.deliver(&mut inst, &[b]);
        assert_eq!(inst.dp_units[0].u_flight, 0);
        assert_eq!(inst.dp_units[0].r_queued, 500);
        // Gated: no second pass while busy.
        assert!(exec.begin_pass(&mut inst, 3000, &c, SimTime::ZERO, false).is_none());
        let (_, signal) = exec.finish_pass(&mut inst);
        assert_eq!(signal.remaining, vec![500]);
        let plan = exec
            .begin_pass(&mut inst, 3000, &c, SimTime::from_secs_f64(0.4), false)
            .unwrap();
        assert_eq!(plan.start, SimTime::from_secs_f64(0.4));
        assert_eq!(plan.per_dp[0][0].request, RequestId(2));
    }

    #[test]
    fn free_running_allows_empty_pass() {
        let c = coeff(1.0, 1e-9);
        let mut inst = instance(2, 10);
        let mut exec = PrefillExecutor::new(2);
        assert!(exec.begin_pass(&mut inst, 10, &c, SimTime::ZERO, false).is_none());
        let plan = exec.begin_pass(&mut inst, 10, &c, SimTime::ZERO, true).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.duration_ns(), 1_000_000_000);
    }

    #[test]
    fn decode_step_releases_finished_requests() {
        let c = EngineCoefficients::default();
        let units = (0..2)
            .map(|d| DpUnitState::new(DpId::new(0, d), 3000, PrefixCache::disabled()))
            .collect();
        let mut inst = InstanceState::new(0, Role::Decode, units);
        let mut exec = DecodeExecutor::new(2);
        inst.dp_units[0].batch_size = 1;
        inst.dp_units[0].kv_load = 100;
        exec.admit(0, RequestId(1), 100, 2);
        let end = exec.begin_step(&inst, &c, SimTime::ZERO).unwrap();
        // Joins mid-step: does not advance this step.
        inst.dp_units[1].batch_size = 1;
        inst.dp_units[1].kv_load = 50;
        exec.admit(1, RequestId(2), 50, 1);
        let out = exec.finish_step(&mut inst, 1);
        assert_eq!(out.end, end);
        assert_eq!(out.advanced, vec![(RequestId(1), 1)]);
        assert_eq!(inst.dp_units[0].kv_load, 101);
        exec.begin_step(&inst, &c, end).unwrap();
        let out = exec.finish_step(&mut inst, 1);
        assert_eq!(out.completed, vec![RequestId(1), RequestId(2)]);
        assert_eq!(inst.dp_units[0].batch_size, 0);
        assert_eq!(inst.dp_units[0].kv_load, 0);
        assert_eq!(inst.dp_units[1].kv_load, 0);
        assert!(exec.begin_step(&inst, &c, end).is_none());
    }

    proptest! {
        #[test]
        fn straggler_monotonicity(loads in prop::collection::vec(0u64..10_000, 1..16), idx in 0usize..16, bump in 0u64..5000) {
            let c = coeff(0.05, 1e-4);
            let before = prefill_forward_time(&loads, &c).unwrap();
            let mut more = loads.clone();
            let i = idx % more.len();
            more[i] += bump;
            prop_assert!(prefill_forward_time(&more, &c).unwrap() >= before);
        }

        #[test]
        fn chunking_conserves_tokens(lens in prop::collection::vec(1u64..9000, 1..12), chunk in 1u64..4000) {
            let c = coeff(0.01, 1e-5);
            let mut inst = instance(3, chunk);
            let mut exec = PrefillExecutor::new(3);
            let mut items = Vec::new();
            for (i, &len) in lens.iter().enumerate() {
                items.push(dispatch(&mut inst, i % 3, i as u64, len));
            }
            exec.deliver(&mut inst, &items);
            let mut per_request = vec![0u64; lens.len()];
            let mut now = SimTime::ZERO;
            while let Some(plan) = exec.begin_pass(&mut inst, chunk, &c, now, false) {
                let plan = plan.clone();
                for (dp, slices) in plan.per_dp.iter().enumerate() {
                    prop_assert!(plan.loads[dp] <= chunk);
                    for s in slices {
                        per_request[s.request.0 as usize] += s.tokens;
                    }
                }
                for u in &inst.dp_units {
                    prop_assert_eq!(u.c_avail() + u.u_flight as i64 + u.r_queued as i64, chunk as i64);
                }
                now = plan.end;
                exec.finish_pass(&mut inst);
            }
            prop_assert_eq!(per_request, lens);
        }
    }
}
