//! Dispatch-on-arrival schedulers used as comparison points.
//!
//! None of them buffer: every request is sent to a DP unit the moment it
//! arrives, whether or not the instance is mid-pass, so all queueing happens
//! on the device.

use crate::config::SchedulerKind;
use crate::types::{DpId, InstanceState};

/// Rotation-next instance, then that instance's rotation-next unit.
/// Advances both cursors. Unhealthy instances are skipped.
pub fn immediate_dispatch(
    instances: &[InstanceState],
    inst_cursor: &mut usize,
    dp_cursors: &mut [usize],
) -> Option<DpId> {
    let n = instances.len();
    let inst = (0..n).map(|k| (*inst_cursor + k) % n).find(|&i| instances[i].healthy)?;
    *inst_cursor = (inst + 1) % n;
    let dp = dp_cursors[inst] % instances[inst].dp_degree();
    dp_cursors[inst] = (dp + 1) % instances[inst].dp_degree();
    Some(DpId::new(inst, dp))
}

/// Flat rotation over every healthy unit in `(instance, local)` order.
pub fn round_robin_dispatch(instances: &[InstanceState], flat_cursor: &mut usize) -> Option<DpId> {
    let units: Vec<DpId> = instances
        .iter()
        .filter(|i| i.healthy)
        .flat_map(|i| i.dp_units.iter().map(|u| u.dp_id))
        .collect();
    if units.is_empty() {
        return None;
    }
    let pick = units[*flat_cursor % units.len()];
    *flat_cursor = (*flat_cursor % units.len()) + 1;
    Some(pick)
}

/// Unit with the fewest outstanding tokens (`u_flight + r_queued`); ties go
/// to the lowest id.
pub fn least_outstanding(instances: &[InstanceState]) -> Option<DpId> {
    instances
        .iter()
        .filter(|i| i.healthy)
        .flat_map(|i| i.dp_units.iter())
        .min_by_key(|u| (u.outstanding(), u.dp_id))
        .map(|u| u.dp_id)
}

/// Cursor state for the arrival-driven schedulers.
#[derive(Debug, Clone)]
pub struct BaselineDispatcher {
    kind: SchedulerKind,
    inst_cursor: usize,
    dp_cursors: Vec<usize>,
    flat_cursor: usize,
}

impl BaselineDispatcher {
    /// Panics if `kind` is the batch scheduler.
    pub fn new(kind: SchedulerKind, n_instances: usize) -> Self {
        assert!(kind != SchedulerKind::Sbs, "not an arrival-driven scheduler");
        BaselineDispatcher {
            kind,
            inst_cursor: 0,
            dp_cursors: vec![0; n_instances],
            flat_cursor: 0,
        }
    }

    pub fn pick(&mut self, instances: &[InstanceState]) -> Option<DpId> {
        match self.kind {
            SchedulerKind::Immediate => immediate_dispatch(instances, &mut self.inst_cursor, &mut self.dp_cursors),
            SchedulerKind::RoundRobin => round_robin_dispatch(instances, &mut self.flat_cursor),
            SchedulerKind::LeastOutstanding => least_outstanding(instances),
            SchedulerKind::Sbs => unreachable!(),
        }
    }
}
