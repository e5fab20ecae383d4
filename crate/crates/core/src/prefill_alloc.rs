//! Prioritized batch allocation of prefill requests onto DP units.
//!
//! Requests are placed longest-first, each onto the unit with the most
//! remaining capacity ("water-filling"). A unit accepts a request as long as
//! its headroom is positive before the assignment, so the last request on a
//! unit may overshoot the chunk; the excess becomes device-side backlog for
//! the next pass. Requests deferred from earlier cycles go before new
//! arrivals, and a request deferred too often is rejected.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::types::{DpId, DpUnitState, Request, RequestId, Tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocMode {
    /// Capacity is headroom minus prompt length.
    #[default]
    Basic,
    /// Cached prefix tokens are free: they consume neither headroom nor compute.
    CacheAware,
}

/// Tokens of `request` already cached on `dp`. At least one prompt token is
/// always left to compute.
pub fn cache_hit(request: &Request, dp: &DpUnitState, mode: AllocMode) -> Tokens {
    match mode {
        AllocMode::Basic => 0,
        AllocMode::CacheAware => dp
            .cache
            .len_hit(&request.prefix_tokens, request.prompt_len)
            .min(request.prompt_len - 1),
    }
}

/// Headroom left on `dp` after taking `request`. May be negative.
pub fn capacity(request: &Request, dp: &DpUnitState, mode: AllocMode) -> i64 {
    capacity_with(dp.c_avail(), request, dp, mode)
}

fn capacity_with(c_avail: i64, request: &Request, dp: &DpUnitState, mode: AllocMode) -> i64 {
    c_avail - (request.prompt_len - cache_hit(request, dp, mode)) as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub request: RequestId,
    /// Index into the unit slice passed to the allocator.
    pub unit: usize,
    pub dp: DpId,
    /// Tokens to compute: prompt length minus cache hit.
    pub tokens: Tokens,
    pub cache_hit: Tokens,
}

/// One greedy decision, for trace comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub request: RequestId,
    /// Chosen unit, or `None` if deferred.
    pub unit: Option<usize>,
    /// Working headroom of the argmax unit after the step.
    pub headroom_after: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocationResult {
    pub mapping: Vec<Assignment>,
    /// Carried to the next cycle, in priority order.
    pub deferred: Vec<RequestId>,
    /// Exceeded the wait-cycle limit.
    pub throttled: Vec<RequestId>,
    pub steps: Vec<Step>,
}

/// Raised when at least one request exceeded the wait-cycle limit. The
/// caller rejects those requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowControl {
    pub throttled: Vec<RequestId>,
}

/// Greedy pass over `queue` against the working headroom `headroom` (one
/// entry per unit, updated in place). `lookup` maps an id to its request.
pub fn greedy_dispatch<'a>(
    queue: &[RequestId],
    lookup: impl Fn(RequestId) -> &'a Request,
    units: &[DpUnitState],
    headroom: &mut [i64],
    mode: AllocMode,
    out: &mut AllocationResult,
) {
    assert!(!units.is_empty(), "allocation needs at least one DP unit");
    debug_assert_eq!(units.len(), headroom.len());
    let mut order: Vec<&Request> = queue.iter().map(|&id| lookup(id)).collect();
    order.sort_by(|a, b| b.prompt_len.cmp(&a.prompt_len).then(a.id.cmp(&b.id)));
    for req in order {
        let mut best = 0;
        let mut best_cap = capacity_with(headroom[0], req, &units[0], mode);
        for (d, unit) in units.iter().enumerate().skip(1) {
            let cap = capacity_with(headroom[d], req, unit, mode);
            if cap > best_cap {
                best = d;
                best_cap = cap;
            }
        }
        if headroom[best] > 0 {
            let hit = cache_hit(req, &units[best], mode);
            headroom[best] = best_cap;
            out.mapping.push(Assignment {
                request: req.id,
                unit: best,
                dp: units[best].dp_id,
                tokens: req.prompt_len - hit,
                cache_hit: hit,
            });
            out.steps.push(Step {
                request: req.id,
                unit: Some(best),
                headroom_after: best_cap,
            });
        } else {
            out.deferred.push(req.id);
            out.steps.push(Step {
                request: req.id,
                unit: None,
                headroom_after: headroom[best],
            });
        }
    }
}

/// Allocates legacy requests first, then new arrivals on what is left.
/// Deferred requests get `wait_cycles += 1`; those above `n_limit` move to
/// `throttled` and a [`FlowControl`] signal is returned.
///
/// `requests` is an arena indexed by `RequestId.0`.
pub fn allocate_batch(
    requests: &mut [Request],
    q_pending: &[RequestId],
    q_new: &[RequestId],
    units: &[DpUnitState],
    n_limit: u32,
    mode: AllocMode,
) -> (AllocationResult, Option<FlowControl>) {
    let mut result = AllocationResult::default();
    if q_pending.is_empty() && q_new.is_empty() {
        return (result, None);
    }
    let mut headroom: Vec<i64> = units.iter().map(DpUnitState::c_avail).collect();
    {
        let arena: &[Request] = requests;
        let lookup = |id: RequestId| &arena[id.0 as usize];
        greedy_dispatch(q_pending, lookup, units, &mut headroom, mode, &mut result);
        greedy_dispatch(q_new, lookup, units, &mut headroom, mode, &mut result);
    }
    // Greedy order is by length; restore input order (legacy first) for the carry-over.
    let deferred: HashSet<RequestId> = std::mem::take(&mut result.deferred).into_iter().collect();
    let mut kept = Vec::with_capacity(deferred.len());
    for &id in q_pending.iter().chain(q_new).filter(|id| deferred.contains(id)) {
        let req = &mut requests[id.0 as usize];
        req.wait_cycles += 1;
        if req.wait_cycles > n_limit {
            result.throttled.push(id);
        } else {
            kept.push(id);
        }
    }
    result.deferred = kept;
    let signal = (!result.throttled.is_empty()).then(|| FlowControl {
        throttled: result.throttled.clone(),
    });
    (result, signal)
}
