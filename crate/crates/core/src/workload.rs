//! Seeded request generators.
//!
//! Open-loop processes (Poisson, evenly spaced) are fully materialized before
//! the run. The closed-loop process keeps a fixed client population; each
//! client issues its next request when the previous one completes. Every
//! client draws lengths from its own RNG stream, so the sequence of requests
//! a client issues does not depend on the scheduler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::ConfigError;
use crate::types::{secs_to_nanos, Request, RequestId, SimTime, Tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    /// Exponential inter-arrival times, `rate` requests per second.
    Poisson { rate: f64 },
    /// Evenly spaced arrivals starting at time zero.
    Uniform { rate: f64 },
    /// `population` clients, each waiting `think` seconds after a completion
    /// before issuing again.
    Closed {
        population: usize,
        #[serde(default)]
        think: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Constant {
        value: Tokens,
    },
    /// Uniform integer in `[min, max]`.
    Uniform {
        min: Tokens,
        max: Tokens,
    },
    /// Lognormal with shape `sigma`, clamped to `[min, max]`, with the
    /// location fitted so the clamped mean is `mean`.
    Lognormal {
        mean: f64,
        sigma: f64,
        min: Tokens,
        max: Tokens,
    },
}

/// A fraction of requests share one of `groups` common prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefixSpec {
    pub fraction: f64,
    pub groups: usize,
    pub length: Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Arrival window, seconds.
    pub duration: f64,
    pub arrival: ArrivalProcess,
    pub prompt: LengthDist,
    pub output: LengthDist,
    #[serde(default)]
    pub prefix: Option<PrefixSpec>,
}

impl LengthDist {
    fn validate(&self, key: &str) -> Result<(), ConfigError> {
        match *self {
            LengthDist::Constant { .. } => Ok(()),
            LengthDist::Uniform { min, max } => {
                if min > max {
                    return Err(ConfigError::invalid(format!("{key}.max"), "must be >= min"));
                }
                Ok(())
            }
            LengthDist::Lognormal { mean, sigma, min, max } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(ConfigError::invalid(format!("{key}.sigma"), "must be positive"));
                }
                if min < 1 || min >= max {
                    return Err(ConfigError::invalid(format!("{key}.min"), "need 1 <= min < max"));
                }
                if !(mean > min as f64 && mean < max as f64) {
                    return Err(ConfigError::invalid(
                        format!("{key}.mean"),
                        "must lie strictly between min and max",
                    ));
                }
                Ok(())
            }
        }
    }

    fn lower_bound(&self) -> Tokens {
        match *self {
            LengthDist::Constant { value } => value,
            LengthDist::Uniform { min, .. } | LengthDist::Lognormal { min, .. } => min,
        }
    }

    /// Resolves fitted parameters once.
    pub fn sampler(&self) -> LengthSampler {
        match *self {
            LengthDist::Constant { value } => LengthSampler::Constant(value),
            LengthDist::Uniform { min, max } => LengthSampler::Uniform(min, max),
            LengthDist::Lognormal { mean, sigma, min, max } => LengthSampler::Lognormal {
                mu: fit_clamped_lognormal_mu(mean, sigma, min as f64, max as f64),
                sigma,
                min,
                max,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthSampler {
    Constant(Tokens),
    Uniform(Tokens, Tokens),
    Lognormal {
        mu: f64,
        sigma: f64,
        min: Tokens,
        max: Tokens,
    },
}

impl LengthSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Tokens {
        match *self {
            LengthSampler::Constant(v) => v,
            LengthSampler::Uniform(lo, hi) => rng.random_range(lo..=hi),
            LengthSampler::Lognormal { mu, sigma, min, max } => {
                let z: f64 = StandardNormal.sample(rng);
                let x = (mu + sigma * z).exp().round();
                (x.clamp(min as f64, max as f64)) as Tokens
            }
        }
    }
}

/// Mean of `clamp(exp(N(mu, sigma^2)), lo, hi)`.
pub fn clamped_lognormal_mean(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let a = (lo.ln() - mu) / sigma;
    let b = (hi.ln() - mu) / sigma;
    lo * n.cdf(a) + hi * (1.0 - n.cdf(b)) + (mu + sigma * sigma / 2.0).exp() * (n.cdf(b - sigma) - n.cdf(a - sigma))
}

/// Location `mu` whose clamped mean equals `mean`, by bisection (the clamped
/// mean is increasing in `mu`).
pub fn fit_clamped_lognormal_mu(mean: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let mut a = lo.ln() - 12.0 * sigma;
    let mut b = hi.ln() + 12.0 * sigma;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if clamped_lognormal_mean(mid, sigma, lo, hi) < mean {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(ConfigError::invalid("workload.duration", "must be positive"));
        }
        match self.arrival {
            ArrivalProcess::Poisson { rate } | ArrivalProcess::Uniform { rate } => {
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(ConfigError::invalid("workload.arrival.rate", "must be positive"));
                }
            }
            ArrivalProcess::Closed { population, think } => {
                if population == 0 {
                    return Err(ConfigError::invalid(
                        "workload.arrival.population",
                        "must be at least 1",
                    ));
                }
                if !(think.is_finite() && think >= 0.0) {
                    return Err(ConfigError::invalid("workload.arrival.think", "must be non-negative"));
                }
            }
        }
        self.prompt.validate("workload.prompt")?;
        self.output.validate("workload.output")?;
        if self.prompt.lower_bound() < 1 {
            return Err(ConfigError::invalid(
                "workload.prompt",
                "prompt lengths must be at least 1",
            ));
        }
        if let Some(p) = &self.prefix {
            if !(0.0..=1.0).contains(&p.fraction) {
                return Err(ConfigError::invalid("workload.prefix.fraction", "must be in [0, 1]"));
            }
            if p.groups == 0 || p.length == 0 {
                return Err(ConfigError::invalid(
                    "workload.prefix.groups",
                    "groups and length must be positive",
                ));
            }
        }
        Ok(())
    }

    /// Open-loop arrival rate, if any.
    pub fn rate(&self) -> Option<f64> {
        match self.arrival {
            ArrivalProcess::Poisson { rate } | ArrivalProcess::Uniform { rate } => Some(rate),
            ArrivalProcess::Closed { .. } => None,
        }
    }

    /// Same spec at a different open-loop rate. Closed-loop specs are unchanged.
    pub fn with_rate(&self, rate: f64) -> Self {
        let mut out = self.clone();
        match &mut out.arrival {
            ArrivalProcess::Poisson { rate: r } | ArrivalProcess::Uniform { rate: r } => *r = rate,
            ArrivalProcess::Closed { .. } => {}
        }
        out
    }

    pub fn is_closed_loop(&self) -> bool {
        matches!(self.arrival, ArrivalProcess::Closed { .. })
    }
}

const ARRIVAL_STREAM: u64 = 0;
const LENGTH_STREAM: u64 = 1;
const CLIENT_STREAM_BASE: u64 = 1 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Deterministic token ids of shared prefix `group`.
fn prefix_tokens(group: usize, len: Tokens) -> Vec<u32> {
    let g = group as u32;
    (0..len as u32)
        .map(|i| g.wrapping_mul(0x9E37_79B9) ^ i.wrapping_mul(0x85EB_CA6B))
        .collect()
}

/// Request factory for one (spec, seed).
#[derive(Debug, Clone)]
pub struct WorkloadGenerator {
    spec: WorkloadSpec,
    seed: u64,
    prompt: LengthSampler,
    output: LengthSampler,
    clients: Vec<ChaCha8Rng>,
}

impl WorkloadGenerator {
    pub fn new(spec: &WorkloadSpec, seed: u64) -> Self {
        let population = match spec.arrival {
            ArrivalProcess::Closed { population, .. } => population,
            _ => 0,
        };
        WorkloadGenerator {
            spec: spec.clone(),
            seed,
            prompt: spec.prompt.sampler(),
            output: spec.output.sampler(),
            clients: (0..population as u64)
                .map(|c| stream(seed, CLIENT_STREAM_BASE + c))
                .collect(),
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    fn draw(
        prompt: &LengthSampler,
        output: &LengthSampler,
        spec: &WorkloadSpec,
        rng: &mut ChaCha8Rng,
        id: RequestId,
        at: SimTime,
    ) -> Request {
        let p = prompt.sample(rng).max(1);
        let o = output.sample(rng);
        let mut req = Request::new(id, at, p, o);
        if let Some(prefix) = &spec.prefix {
            let shared = rng.random::<f64>() < prefix.fraction;
            let group = rng.random_range(0..prefix.groups);
            if shared {
                req.prefix_tokens = prefix_tokens(group, prefix.length.min(p));
            }
        }
        req
    }

    /// Requests known before the run: the whole open-loop stream, or each
    /// closed-loop client's first request at time zero (request `i` belongs
    /// to client `i`).
    pub fn initial(&mut self) -> Vec<Request> {
        let end = SimTime::from_secs_f64(self.spec.duration);
        let mut lengths = stream(self.seed, LENGTH_STREAM);
        let mut arrivals = stream(self.seed, ARRIVAL_STREAM);
        let mut out = Vec::new();
        match self.spec.arrival {
            ArrivalProcess::Poisson { rate } => {
                let exp = Exp::new(rate).expect("validated rate");
                let mut t = 0.0;
                loop {
                    t += exp.sample(&mut arrivals);
                    let at = SimTime::from_secs_f64(t);
                    if at >= end {
                        break;
                    }
                    let id = RequestId(out.len() as u64);
                    out.push(Self::draw(&self.prompt, &self.output, &self.spec, &mut lengths, id, at));
                }
            }
            ArrivalProcess::Uniform { rate } => {
                let gap = secs_to_nanos(1.0 / rate).max(1);
                let mut at = SimTime::ZERO;
                while at < end {
                    let id = RequestId(out.len() as u64);
                    out.push(Self::draw(&self.prompt, &self.output, &self.spec, &mut lengths, id, at));
                    at = at + gap;
                }
            }
            ArrivalProcess::Closed { population, .. } => {
                for c in 0..population {
                    out.push(self.next_for_client(c, RequestId(c as u64), SimTime::ZERO));
                }
            }
        }
        out
    }

    /// The next request of closed-loop client `client`, issued at `at`.
    pub fn next_for_client(&mut self, client: usize, id: RequestId, at: SimTime) -> Request {
        let rng = &mut self.clients[client];
        Self::draw(&self.prompt, &self.output, &self.spec, rng, id, at)
    }

    /// Think time between a completion and the client's next request, ns.
    pub fn think_ns(&self) -> u64 {
        match self.spec.arrival {
            ArrivalProcess::Closed { think, .. } => secs_to_nanos(think),
            _ => 0,
        }
    }
}

/// SHA-256 (hex) over the spec, the seed and the pre-materialized requests.
pub fn workload_digest(spec: &WorkloadSpec, seed: u64, requests: &[Request]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    h.update(seed.to_le_bytes());
    for r in requests {
        h.update(r.id.0.to_le_bytes());
        h.update(r.arrival_time.as_nanos().to_le_bytes());
        h.update(r.prompt_len.to_le_bytes());
        h.update(r.output_len.to_le_bytes());
        h.update((r.prefix_tokens.len() as u64).to_le_bytes());
        for t in &r.prefix_tokens {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(arrival: ArrivalProcess, prompt: LengthDist) -> WorkloadSpec {
        WorkloadSpec {
            duration: 10.0,
            arrival,
            prompt,
            output: LengthDist::Constant { value: 10 },
            prefix: None,
        }
    }

    fn short_lengths() -> LengthDist {
        LengthDist::Lognormal {
            mean: 1000.0,
            sigma: 1.0,
            min: 1,
            max: 3000,
        }
    }

    /// Monte Carlo mean of the clamped law, independent of the closed form.
    fn empirical_mean(dist: &LengthDist, n: usize) -> f64 {
        let s = dist.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n).map(|_| s.sample(&mut rng) as f64).sum::<f64>() / n as f64
    }

    #[test]
    fn short_scenario_mean() {
        let d = short_lengths();
        let m = empirical_mean(&d, 100_000);
        assert!((m - 1000.0).abs() <= 50.0, "mean {m}");
    }

    #[test]
    fn long_scenario_mean() {
        let d = LengthDist::Lognormal {
            mean: 6700.0,
            sigma: 1.0,
            min: 3000,
            max: 64000,
        };
        let m = empirical_mean(&d, 100_000);
        assert!((m - 6700.0).abs() <= 335.0, "mean {m}");
    }

    #[test]
    fn clamped_mean_limits() {
        // Wide clamp: plain lognormal mean.
        assert_relative_eq!(
            clamped_lognormal_mean(3.0, 0.5, 1e-9, 1e12),
            (3.0f64 + 0.125).exp(),
            max_relative = 1e-9
        );
        // Mass entirely below the clamp.
        assert_relative_eq!(clamped_lognormal_mean(-20.0, 0.5, 5.0, 10.0), 5.0, max_relative = 1e-9);
    }

    #[test]
    fn uniform_spacing_is_periodic() {
        let s = spec(ArrivalProcess::Uniform { rate: 8.0 }, LengthDist::Constant { value: 1 });
        let reqs = WorkloadGenerator::new(&s, 1).initial();
        assert_eq!(reqs.len(), 80);
        for w in reqs.windows(2) {
            assert_eq!(w[1].arrival_time - w[0].arrival_time, 125_000_000);
        }
    }

    #[test]
    fn poisson_rate_and_determinism() {
        let s = spec(ArrivalProcess::Poisson { rate: 50.0 }, short_lengths());
        let a = WorkloadGenerator::new(&s, 3).initial();
        let b = WorkloadGenerator::new(&s, 3).initial();
        let c = WorkloadGenerator::new(&s, 4).initial();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((a.len() as f64 - 500.0).abs() < 100.0);
        assert_eq!(workload_digest(&s, 3, &a), workload_digest(&s, 3, &b));
        assert_ne!(workload_digest(&s, 3, &a), workload_digest(&s, 4, &c));
    }

    #[test]
    fn closed_loop_clients_are_independent_of_order() {
        let s = spec(
            ArrivalProcess::Closed {
                population: 3,
                think: 0.0,
            },
            short_lengths(),
        );
        let mut g1 = WorkloadGenerator::new(&s, 9);
        let mut g2 = WorkloadGenerator::new(&s, 9);
        assert_eq!(g1.initial(), g2.initial());
        let a = g1.next_for_client(2, RequestId(10), SimTime::ZERO);
        let _ = g2.next_for_client(0, RequestId(10), SimTime::ZERO);
        let b = g2.next_for_client(2, RequestId(10), SimTime::ZERO);
        assert_eq!(a.prompt_len, b.prompt_len);
    }

    #[test]
    fn shared_prefixes() {
        let mut s = spec(
            ArrivalProcess::Poisson { rate: 100.0 },
            LengthDist::Constant { value: 2000 },
        );
        s.prefix = Some(PrefixSpec {
            fraction: 0.5,
            groups: 4,
            length: 512,
        });
        let reqs = WorkloadGenerator::new(&s, 5).initial();
        let shared = reqs.iter().filter(|r| !r.prefix_tokens.is_empty()).count();
        let frac = shared as f64 / reqs.len() as f64;
        assert!((frac - 0.5).abs() < 0.1, "{frac}");
        assert!(reqs
            .iter()
            .all(|r| r.prefix_tokens.is_empty() || r.prefix_tokens.len() == 512));
    }

    #[test]
    fn validation() {
        let bad_rate = spec(ArrivalProcess::Poisson { rate: 0.0 }, LengthDist::Constant { value: 1 });
        assert!(bad_rate.validate().is_err());
        let mut bad_duration = spec(ArrivalProcess::Poisson { rate: 1.0 }, LengthDist::Constant { value: 1 });
        bad_duration.duration = 0.0;
        assert!(bad_duration.validate().is_err());
        let zero_prompt = spec(ArrivalProcess::Poisson { rate: 1.0 }, LengthDist::Constant { value: 0 });
        assert!(zero_prompt.validate().is_err());
        let bad_mean = spec(
            ArrivalProcess::Poisson { rate: 1.0 },
            LengthDist::Lognormal {
                mean: 5000.0,
                sigma: 1.0,
                min: 1,
                max: 3000,
            },
        );
        assert!(bad_mean.validate().is_err());
    }

    proptest! {
        #[test]
        fn lengths_respect_clamp(seed in 0u64..1000, lo in 1u64..500, span in 10u64..5000, sigma in 0.1f64..2.5) {
            let hi = lo + span;
            let mean = lo as f64 + span as f64 * 0.3;
            let s = spec(
                ArrivalProcess::Poisson { rate: 20.0 },
                LengthDist::Lognormal { mean, sigma, min: lo, max: hi },
            );
            for r in WorkloadGenerator::new(&s, seed).initial() {
                prop_assert!(r.prompt_len >= lo && r.prompt_len <= hi);
            }
        }
    }
}
