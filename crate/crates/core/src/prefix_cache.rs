//! Per-DP prefix cache stand-in.
//!
//! Keys are hashes of the first `k` prompt tokens for each configured probe
//! length `k`; values are the cached length. Entries are evicted LRU once the
//! summed cached length exceeds the unit's token budget.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::sync::Arc;

use crate::types::Tokens;

#[derive(Debug, Clone, Copy)]
struct Entry {
    len: Tokens,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct PrefixCache {
    probes: Arc<[Tokens]>,
    budget: Tokens,
    used: Tokens,
    entries: HashMap<u64, Entry>,
    lru: BTreeMap<u64, u64>,
    clock: u64,
}

/// Hashes of `tokens[..k]` for every probe `k <= tokens.len()`, paired with `k`.
fn probe_hashes(probes: &[Tokens], tokens: &[u32]) -> Vec<(Tokens, u64)> {
    let mut out = Vec::with_capacity(probes.len());
    let mut hasher = DefaultHasher::new();
    let mut fed = 0usize;
    for &k in probes {
        let k_usize = k as usize;
        if k_usize == 0 || k_usize > tokens.len() {
            continue;
        }
        for &tok in &tokens[fed..k_usize] {
            hasher.write_u32(tok);
        }
        fed = k_usize;
        out.push((k, hasher.clone().finish()));
    }
    out
}

impl PrefixCache {
    /// `probe_lengths` need not be sorted; duplicates and zeros are dropped.
    pub fn new(probe_lengths: &[Tokens], budget_tokens: Tokens) -> Self {
        let mut probes: Vec<Tokens> = probe_lengths.iter().copied().filter(|&k| k > 0).collect();
        probes.sort_unstable();
        probes.dedup();
        PrefixCache {
            probes: probes.into(),
            budget: budget_tokens,
            used: 0,
            entries: HashMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn disabled() -> Self {
        PrefixCache::new(&[], 0)
    }

    pub fn is_enabled(&self) -> bool {
        !self.probes.is_empty() && self.budget > 0
    }

    pub fn used_tokens(&self) -> Tokens {
        self.used
    }

    /// Longest cached prefix of `prefix`, capped at `prompt_len`. Zero on miss.
    pub fn len_hit(&self, prefix: &[u32], prompt_len: Tokens) -> Tokens {
        if !self.is_enabled() || prefix.is_empty() {
            return 0;
        }
        probe_hashes(&self.probes, prefix)
            .into_iter()
            .rev()
            .find(|(_, h)| self.entries.contains_key(h))
            .map(|(k, _)| k.min(prompt_len))
            .unwrap_or(0)
    }

    /// Records that `prefix` now has KV resident on this unit.
    pub fn insert(&mut self, prefix: &[u32]) {
        if !self.is_enabled() || prefix.is_empty() {
            return;
        }
        for (k, h) in probe_hashes(&self.probes, prefix) {
            if k > self.budget {
                continue;
            }
            self.clock += 1;
            let stamp = self.clock;
            if let Some(entry) = self.entries.get_mut(&h) {
                self.lru.remove(&entry.stamp);
                entry.stamp = stamp;
            } else {
                self.entries.insert(h, Entry { len: k, stamp });
                self.used += k;
            }
            self.lru.insert(stamp, h);
        }
        while self.used > self.budget {
            let Some((_, victim)) = self.lru.pop_first() else {
                break;
            };
            if let Some(entry) = self.entries.remove(&victim) {
                self.used -= entry.len;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: u32, seed: u32) -> Vec<u32> {
        (0..n).map(|i| i.wrapping_mul(31).wrapping_add(seed)).collect()
    }

    #[test]
    fn miss_then_hit_longest_probe() {
        let mut cache = PrefixCache::new(&[64, 256, 1024], 10_000);
        let prefix = tokens(600, 7);
        assert_eq!(cache.len_hit(&prefix, 1000), 0);
        cache.insert(&prefix);
        assert_eq!(cache.len_hit(&prefix, 1000), 256);
        // A longer prompt sharing the first 300 tokens still matches 256.
        let mut other = prefix[..300].to_vec();
        other.extend(tokens(500, 99));
        assert_eq!(cache.len_hit(&other, 800), 256);
        // Capped by prompt length.
        assert_eq!(cache.len_hit(&prefix, 100), 100);
    }

    #[test]
    fn different_prefix_misses() {
        let mut cache = PrefixCache::new(&[16], 1000);
        cache.insert(&tokens(32, 1));
        assert_eq!(cache.len_hit(&tokens(32, 2), 32), 0);
    }

    #[test]
    fn lru_eviction_respects_budget() {
        let mut cache = PrefixCache::new(&[100], 250);
        let a = tokens(100, 1);
        let b = tokens(100, 2);
        let c = tokens(100, 3);
        cache.insert(&a);
        cache.insert(&b);
        cache.insert(&a); // refresh a
        cache.insert(&c); // evicts b
        assert!(cache.used_tokens() <= 250);
        assert_eq!(cache.len_hit(&a, 100), 100);
        assert_eq!(cache.len_hit(&b, 100), 0);
        assert_eq!(cache.len_hit(&c, 100), 100);
    }

    #[test]
    fn disabled_cache_never_hits() {
        let mut cache = PrefixCache::disabled();
        cache.insert(&tokens(10, 0));
        assert_eq!(cache.len_hit(&tokens(10, 0), 10), 0);
    }
}
