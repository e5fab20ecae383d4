//! Decode placement: mask KV-load outliers, then pick the unit with the
//! lexicographically smallest `<B, K>` (batch size first, KV load second).
//!
//! The outlier threshold is `Q3 + k * (Q3 - Q1)` over the current KV loads.
//! Units above it are excluded unless that would exclude every unit.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{DecodePolicy, DecodeSortKey};
use crate::types::{DpUnitState, Request, RequestId, Tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("percentile of an empty sample")]
pub struct EmptySample;

/// Linear-interpolation percentile on `(n - 1)`-scaled ranks.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, EmptySample> {
    if values.is_empty() {
        return Err(EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (sorted.len() - 1) as f64 * p.clamp(0.0, 100.0) / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// `Q3 + k * IQR` over the KV loads.
pub fn outlier_threshold(kv_loads: &[Tokens], k: f64) -> Result<f64, EmptySample> {
    let values: Vec<f64> = kv_loads.iter().map(|&x| x as f64).collect();
    let q1 = percentile(&values, 25.0)?;
    let q3 = percentile(&values, 75.0)?;
    Ok(q3 + k * (q3 - q1))
}

/// `a` strictly precedes `b`: smaller batch, or equal batch and smaller KV.
pub fn lex_compare(a: (u32, Tokens), b: (u32, Tokens)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn lex_order(a: (u32, Tokens), b: (u32, Tokens)) -> Ordering {
    if lex_compare(a, b) {
        Ordering::Less
    } else if lex_compare(b, a) {
        Ordering::Greater
    } else {
        Ordering::Equal
    }
}

/// Result of one unit selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub unit: usize,
    /// At least one unit was masked out.
    pub masked: bool,
    /// Every unit was masked, so all were considered.
    pub fallback: bool,
}

/// Masks units failing `safe(k_load, threshold)` and returns the lex-min of
/// the rest (lowest index on ties), falling back to all units.
pub fn select_unit(states: &[(u32, Tokens)], k: f64, safe: impl Fn(Tokens, f64) -> bool) -> Selection {
    assert!(!states.is_empty(), "decode placement needs at least one unit");
    let loads: Vec<Tokens> = states.iter().map(|s| s.1).collect();
    let th = outlier_threshold(&loads, k).expect("non-empty");
    let survivors: Vec<usize> = (0..states.len()).filter(|&i| safe(states[i].1, th)).collect();
    let masked = survivors.len() < states.len();
    let fallback = survivors.is_empty();
    let pool: Vec<usize> = if fallback {
        (0..states.len()).collect()
    } else {
        survivors
    };
    let unit = pool
        .into_iter()
        .min_by(|&a, &b| lex_order(states[a], states[b]).then(a.cmp(&b)))
        .expect("non-empty pool");
    Selection { unit, masked, fallback }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodePlan {
    /// (request, unit index) in placement order.
    pub assignments: Vec<(RequestId, usize)>,
    /// Working `<B, K>` per unit after the batch.
    pub states: Vec<(u32, Tokens)>,
    pub mask_events: u64,
    pub fallback_events: u64,
}

pub fn sort_length(request: &Request, key: DecodeSortKey) -> Tokens {
    match key {
        DecodeSortKey::Total => request.total_len(),
        DecodeSortKey::Prompt => request.prompt_len,
    }
}

/// Stateful decode placement policy.
#[derive(Debug, Clone)]
pub struct DecodeAllocator {
    policy: DecodePolicy,
    iqr_k: f64,
    sort_key: DecodeSortKey,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl DecodeAllocator {
    pub fn new(policy: DecodePolicy, iqr_k: f64, sort_key: DecodeSortKey, rng: ChaCha8Rng) -> Self {
        DecodeAllocator {
            policy,
            iqr_k,
            sort_key,
            rng,
            cursor: 0,
        }
    }

    pub fn policy(&self) -> DecodePolicy {
        self.policy
    }

    /// Plans placement of `requests` over a snapshot of `units`. Every
    /// placement adds one to the unit's `B` and the request's prompt length
    /// to its `K` before the next request is considered.
    pub fn schedule(&mut self, requests: &[&Request], units: &[DpUnitState]) -> DecodePlan {
        assert!(!units.is_empty(), "decode placement needs at least one unit");
        let mut plan = DecodePlan {
            states: units.iter().map(|u| (u.batch_size, u.kv_load)).collect(),
            ..DecodePlan::default()
        };
        let mut order: Vec<&Request> = requests.to_vec();
        if self.policy == DecodePolicy::IqrLex {
            let key = self.sort_key;
            order.sort_by(|a, b| sort_length(b, key).cmp(&sort_length(a, key)).then(a.id.cmp(&b.id)));
        }
        for req in order {
            let unit = match self.policy {
                DecodePolicy::IqrLex => {
                    let sel = select_unit(&plan.states, self.iqr_k, |k, th| k as f64 <= th);
                    plan.mask_events += sel.masked as u64;
                    plan.fallback_events += sel.fallback as u64;
                    sel.unit
                }
                DecodePolicy::Random => self.rng.random_range(0..units.len()),
                DecodePolicy::RoundRobin => {
                    let u = self.cursor % units.len();
                    self.cursor = (u + 1) % units.len();
                    u
                }
            };
            plan.states[unit].0 += 1;
            plan.states[unit].1 += req.prompt_len;
            plan.assignments.push((req.id, unit));
        }
        plan
    }
}

/// IQR-lex placement with default settings; convenience for one-off batches.
pub fn schedule_decode_batch(requests: &[&Request], units: &[DpUnitState], k: f64) -> DecodePlan {
    use rand::SeedableRng;
    DecodeAllocator::new(
        DecodePolicy::IqrLex,
        k,
        DecodeSortKey::Total,
        ChaCha8Rng::seed_from_u64(0),
    )
    .schedule(requests, units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefix_cache::PrefixCache;
    use crate::types::{DpId, SimTime};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn units(states: &[(u32, Tokens)]) -> Vec<DpUnitState> {
        states
            .iter()
            .enumerate()
            .map(|(d, &(b, k))| {
                let mut u = DpUnitState::new(DpId::new(0, d), 3000, PrefixCache::disabled());
                u.batch_size = b;
                u.kv_load = k;
                u
            })
            .collect()
    }

    fn req(id: u64, prompt: Tokens, output: Tokens) -> Request {
        Request::new(RequestId(id), SimTime::ZERO, prompt, output)
    }

    #[test]
    fn percentile_examples() {
        let v = [10.0, 20.0, 30.0, 40.0];
        assert_relative_eq!(percentile(&v, 25.0).unwrap(), 17.5);
        assert_relative_eq!(percentile(&v, 75.0).unwrap(), 32.5);
        assert_eq!(percentile(&[5.0], 37.0).unwrap(), 5.0);
        assert_eq!(percentile(&[10.0; 4], 75.0).unwrap(), 10.0);
        assert_eq!(percentile(&[], 50.0), Err(EmptySample));
    }

    #[test]
    fn threshold_examples() {
        assert_relative_eq!(outlier_threshold(&[10, 20, 30, 40], 1.5).unwrap(), 55.0);
        assert_relative_eq!(outlier_threshold(&[10, 10, 10, 100], 1.5).unwrap(), 66.25);
        assert_relative_eq!(outlier_threshold(&[7, 7, 7], 1.5).unwrap(), 7.0);
    }

    #[test]
    fn lex_examples() {
        assert!(lex_compare((2, 50), (3, 10)));
        assert!(!lex_compare((2, 50), (2, 40)));
        assert!(lex_compare((2, 40), (2, 50)));
        assert!(!lex_compare((2, 50), (2, 50)));
    }

    #[test]
    fn fill_the_valley_trace() {
        let u = units(&[(0, 0), (0, 0)]);
        let a = req(0, 50, 0);
        let b = req(1, 100, 0);
        let plan = schedule_decode_batch(&[&a, &b], &u, 1.5);
        assert_eq!(plan.assignments, vec![(RequestId(1), 0), (RequestId(0), 1)]);
        assert_eq!(plan.states, vec![(1, 100), (1, 50)]);
    }

    #[test]
    fn heavy_unit_is_masked() {
        let u = units(&[(0, 10), (0, 10), (0, 10), (0, 1000)]);
        let reqs: Vec<Request> = (0..6).map(|i| req(i, 5, 0)).collect();
        let refs: Vec<&Request> = reqs.iter().collect();
        let plan = schedule_decode_batch(&refs, &u, 1.5);
        assert!(plan.assignments.iter().all(|&(_, unit)| unit != 3));
        assert_eq!(plan.mask_events, 6);
        assert_eq!(plan.fallback_events, 0);
    }

    #[test]
    fn fallback_when_everything_masked() {
        let sel = select_unit(&[(3, 10), (1, 20)], 1.5, |_, _| false);
        assert!(sel.fallback);
        assert_eq!(sel.unit, 1);
    }

    #[test]
    fn prompt_sort_key() {
        let u = units(&[(0, 0), (0, 0)]);
        let a = req(0, 100, 10);
        let b = req(1, 60, 1000);
        let mut alloc = DecodeAllocator::new(
            DecodePolicy::IqrLex,
            1.5,
            DecodeSortKey::Prompt,
            rand::SeedableRng::seed_from_u64(0),
        );
        let plan = alloc.schedule(&[&a, &b], &u);
        assert_eq!(plan.assignments[0].0, RequestId(0));
        let plan = schedule_decode_batch(&[&a, &b], &u, 1.5);
        assert_eq!(plan.assignments[0].0, RequestId(1));
    }

    #[test]
    fn round_robin_policy_cycles() {
        let u = units(&[(0, 0); 3]);
        let reqs: Vec<Request> = (0..4).map(|i| req(i, 5, 0)).collect();
        let refs: Vec<&Request> = reqs.iter().collect();
        let mut alloc = DecodeAllocator::new(
            DecodePolicy::RoundRobin,
            1.5,
            DecodeSortKey::Total,
            rand::SeedableRng::seed_from_u64(0),
        );
        let units: Vec<usize> = alloc.schedule(&refs, &u).assignments.iter().map(|a| a.1).collect();
        assert_eq!(units, vec![0, 1, 2, 0]);
    }

    fn pair() -> impl Strategy<Value = (u32, Tokens)> {
        (0u32..6, 0u64..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn lex_is_strict_weak_order(a in pair(), b in pair(), c in pair()) {
            prop_assert!(!lex_compare(a, a));
            if lex_compare(a, b) {
                prop_assert!(!lex_compare(b, a));
            }
            if lex_compare(a, b) && lex_compare(b, c) {
                prop_assert!(lex_compare(a, c));
            }
            // Incomparability is transitive.
            let inc = |x, y| !lex_compare(x, y) && !lex_compare(y, x);
            if inc(a, b) && inc(b, c) {
                prop_assert!(inc(a, c));
            }
        }
    }

    proptest! {
        #[test]
        fn batch_updates_sums(
            states in prop::collection::vec((0u32..50, 0u64..100_000), 1..12),
            lens in prop::collection::vec((1u64..5000, 0u64..2000), 0..30),
        ) {
            let u = units(&states);
            let reqs: Vec<Request> = lens.iter().enumerate().map(|(i, &(p, o))| req(i as u64, p, o)).collect();
            let refs: Vec<&Request> = reqs.iter().collect();
            let plan = schedule_decode_batch(&refs, &u, 1.5);
            let b0: u64 = states.iter().map(|s| s.0 as u64).sum();
            let k0: u64 = states.iter().map(|s| s.1).sum();
            let b1: u64 = plan.states.iter().map(|s| s.0 as u64).sum();
            let k1: u64 = plan.states.iter().map(|s| s.1).sum();
            prop_assert_eq!(b1 - b0, reqs.len() as u64);
            prop_assert_eq!(k1 - k0, reqs.iter().map(|r| r.prompt_len).sum::<u64>());
        }

        #[test]
        fn mask_soundness(states in prop::collection::vec((0u32..50, 0u64..100_000), 1..12)) {
            let sel = select_unit(&states, 1.5, |k, th| k as f64 <= th);
            let loads: Vec<Tokens> = states.iter().map(|s| s.1).collect();
            let th = outlier_threshold(&loads, 1.5).unwrap();
            let any_safe = loads.iter().any(|&k| k as f64 <= th);
            prop_assert!(any_safe);
            prop_assert!(loads[sel.unit] as f64 <= th);
        }
    }
}
