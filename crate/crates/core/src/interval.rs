//! Adaptive dispatch interval and the instance readiness protocol.
//!
//! The interval is `(T̄ + L_net) / N_active`, where `T̄` is the unweighted mean
//! of the last `w_size` measured forward times. All arithmetic is in integer
//! nanoseconds.
//!
//! An instance is ready for its next batch when it is quiescent, when it has
//! acknowledged the previous dispatch with an EndForward, or when its watchdog
//! has expired.

use thiserror::Error;
use tracing::warn;

use crate::types::{InstanceId, InstanceState, SchedulerState, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("rejected non-positive forward time sample ({0} ns)")]
pub struct RejectedSample(pub i64);

impl SchedulerState {
    /// Recomputes `i_opt` from the current `t_fwd_bar`, `l_net` and
    /// `n_active`. With no active instance the interval is kept and dispatch
    /// is suspended.
    pub fn recompute_interval(&mut self) -> u64 {
        if self.n_active == 0 {
            self.suspended = true;
        } else {
            self.suspended = false;
            self.i_opt = (self.t_fwd_bar + self.l_net) / self.n_active as u64;
        }
        self.i_opt
    }

    /// Folds one measured forward time into the moving average.
    pub fn on_end_forward(&mut self, measured_ns: i64) -> Result<u64, RejectedSample> {
        if measured_ns <= 0 {
            warn!(measured_ns, "rejecting forward time sample");
            return Err(RejectedSample(measured_ns));
        }
        self.exec_window.push_back(measured_ns as u64);
        while self.exec_window.len() > self.w_size {
            self.exec_window.pop_front();
        }
        self.t_fwd_bar = window_mean(self.exec_window.iter().copied()).unwrap_or(self.t_default);
        Ok(self.recompute_interval())
    }

    pub fn on_topology_change(&mut self, n_new: usize) -> u64 {
        self.n_active = n_new;
        self.recompute_interval()
    }
}

/// Mean rounded to the nearest nanosecond; `None` for an empty window.
fn window_mean(samples: impl Iterator<Item = u64>) -> Option<u64> {
    let (sum, n) = samples.fold((0u128, 0u128), |(s, n), x| (s + x as u128, n + 1));
    (n > 0).then(|| ((sum + n / 2) / n) as u64)
}

/// Which leg of the readiness check let the instance through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readiness {
    Quiescent,
    Acknowledged,
    WatchdogExpired,
}

pub fn readiness(inst: &InstanceState, now: SimTime) -> Option<Readiness> {
    if !inst.healthy {
        None
    } else if inst.task_depth == 0 && !inst.busy {
        Some(Readiness::Quiescent)
    } else if inst.acked {
        Some(Readiness::Acknowledged)
    } else if inst.watchdog_deadline.is_some_and(|d| now >= d) {
        Some(Readiness::WatchdogExpired)
    } else {
        None
    }
}

/// Next healthy instance in rotation order at or after `cursor`.
pub fn rotation_target(instances: &[InstanceState], cursor: usize) -> Option<InstanceId> {
    let n = instances.len();
    (0..n).map(|k| (cursor + k) % n).find(|&i| instances[i].healthy)
}

/// The rotation target if it is ready, otherwise `None`: the tick is skipped
/// and dispatch waits for that instance's EndForward or watchdog.
pub fn select_ready_instance(instances: &[InstanceState], cursor: usize, now: SimTime) -> Option<InstanceId> {
    let target = rotation_target(instances, cursor)?;
    readiness(&instances[target], now).map(|_| target)
}

/// Records a dispatch and arms the watchdog with `T̄` bound now. Returns the
/// deadline and the generation an expiry event must carry to be honored.
pub fn arm_watchdog(inst: &mut InstanceState, now: SimTime, t_bar_ns: u64, multiplier: f64) -> (SimTime, u64) {
    inst.task_depth += 1;
    inst.acked = false;
    inst.watchdog_gen += 1;
    let timeout = (t_bar_ns as f64 * multiplier).round() as u64;
    let deadline = now + timeout;
    inst.watchdog_deadline = Some(deadline);
    (deadline, inst.watchdog_gen)
}

/// EndForward reached the scheduler: acknowledge and disarm the watchdog.
pub fn acknowledge(inst: &mut InstanceState) {
    inst.acked = true;
    inst.task_depth = inst.task_depth.saturating_sub(1);
    inst.watchdog_gen += 1;
    inst.watchdog_deadline = None;
}

/// Watchdog expiry. Stale generations are ignored; a live one forces the
/// instance back to a dispatchable state. Returns whether it was live.
pub fn expire_watchdog(inst: &mut InstanceState, generation: u64) -> bool {
    if generation != inst.watchdog_gen || inst.watchdog_deadline.is_none() {
        return false;
    }
    warn!(instance = inst.instance_id, "watchdog expired, forcing state reset");
    inst.task_depth = 0;
    inst.acked = true;
    inst.watchdog_deadline = None;
    true
}
