//! Latency decomposition, chunk utilization, KV balance and throughput.
//!
//! CSV column orders are fixed:
//!
//! - `requests.csv`: id, arrival, dispatch, prefill_start, first_token,
//!   completion, scheduler_wait, device_wait, ttft
//! - `passes.csv`: time, instance, dp, assigned_tokens, utilization
//! - `kvband.csv`: time, mean, lo, hi, min, max
//!
//! Times are seconds with nine decimals; unset timestamps are empty fields.

use std::io::{self, Write};

use serde::Serialize;

use crate::types::{InstanceId, Outcome, Request, SimTime, Tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Immediate,
    Staggered,
}

/// Closed-form mean queueing delay for gated servers of period `t`: `t/2`
/// when arrivals land on a random server, `t/(2n)` when dispatch is
/// staggered across `n` servers.
pub fn expected_wait(strategy: Strategy, t: f64, n: usize) -> f64 {
    assert!(t > 0.0 && n >= 1);
    match strategy {
        Strategy::Immediate => t / 2.0,
        Strategy::Staggered => t / (2.0 * n as f64),
    }
}

pub fn chunk_utilization(assigned: Tokens, c_chunk: Tokens) -> f64 {
    assert!(c_chunk > 0);
    assigned.min(c_chunk) as f64 / c_chunk as f64
}

/// Population statistics of the per-unit KV loads at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandPoint {
    pub mean: f64,
    pub sigma: f64,
    pub min: f64,
    pub max: f64,
}

impl BandPoint {
    pub fn lo(&self) -> f64 {
        self.mean - self.sigma
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.sigma
    }
}

pub fn kv_band(loads: &[Tokens]) -> BandPoint {
    assert!(!loads.is_empty(), "band needs at least one unit");
    let n = loads.len() as f64;
    let mean = loads.iter().map(|&k| k as f64).sum::<f64>() / n;
    let var = loads.iter().map(|&k| (k as f64 - mean).powi(2)).sum::<f64>() / n;
    BandPoint {
        mean,
        sigma: var.sqrt(),
        min: *loads.iter().min().unwrap() as f64,
        max: *loads.iter().max().unwrap() as f64,
    }
}

/// One prefill pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassRecord {
    pub start: SimTime,
    pub instance: InstanceId,
    pub loads: Vec<Tokens>,
    pub c_chunk: Tokens,
}

impl PassRecord {
    /// Mean over units of clamped fill fraction.
    pub fn utilization(&self) -> f64 {
        self.loads
            .iter()
            .map(|&l| chunk_utilization(l, self.c_chunk))
            .sum::<f64>()
            / self.loads.len() as f64
    }
}

/// Latency components of one request, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub scheduler_wait: f64,
    pub device_wait: f64,
    pub ttft: f64,
}

pub fn latency(r: &Request) -> Option<Latency> {
    let ts = &r.timestamps;
    let (d, p, f) = (ts.dispatch?, ts.prefill_start?, ts.first_token?);
    Some(Latency {
        scheduler_wait: d.since(r.arrival_time) as f64 * 1e-9,
        device_wait: p.since(d) as f64 * 1e-9,
        ttft: f.since(r.arrival_time) as f64 * 1e-9,
    })
}

/// Steady-state measurement window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub start: SimTime,
    pub end: SimTime,
}

impl Window {
    pub fn new(duration_secs: f64, warmup_fraction: f64) -> Self {
        Window {
            start: SimTime::from_secs_f64(duration_secs * warmup_fraction),
            end: SimTime::from_secs_f64(duration_secs),
        }
    }

    pub fn contains(&self, t: SimTime) -> bool {
        t >= self.start && t < self.end
    }

    pub fn secs(&self) -> f64 {
        (self.end - self.start) as f64 * 1e-9
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    Some(sorted[idx])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_ttft: Option<f64>,
    pub p50_ttft: Option<f64>,
    pub p90_ttft: Option<f64>,
    pub p99_ttft: Option<f64>,
    pub mean_scheduler_wait: Option<f64>,
    pub mean_device_wait: Option<f64>,
}

/// Latency aggregates over requests arriving inside `window` that reached
/// their first token.
pub fn summarize_latency(requests: &[Request], window: Window) -> LatencySummary {
    let lats: Vec<Latency> = requests
        .iter()
        .filter(|r| window.contains(r.arrival_time))
        .filter_map(latency)
        .collect();
    let mut ttfts: Vec<f64> = lats.iter().map(|l| l.ttft).collect();
    ttfts.sort_by(f64::total_cmp);
    LatencySummary {
        count: lats.len(),
        mean_ttft: mean(ttfts.iter().copied()),
        p50_ttft: quantile(&ttfts, 0.5),
        p90_ttft: quantile(&ttfts, 0.9),
        p99_ttft: quantile(&ttfts, 0.99),
        mean_scheduler_wait: mean(lats.iter().map(|l| l.scheduler_wait)),
        mean_device_wait: mean(lats.iter().map(|l| l.device_wait)),
    }
}

/// Equal-weight mean utilization of passes starting inside `window`.
/// Passes that carried no tokens at all are skipped: they are idle cycling,
/// not batches.
pub fn mean_chunk_utilization(passes: &[PassRecord], window: Window) -> Option<f64> {
    mean(
        passes
            .iter()
            .filter(|p| window.contains(p.start) && p.loads.iter().any(|&l| l > 0))
            .map(PassRecord::utilization),
    )
}

fn fmt_time(t: Option<SimTime>) -> String {
    t.map(|t| format!("{:.9}", t.as_secs_f64())).unwrap_or_default()
}

fn fmt_secs(x: Option<f64>) -> String {
    x.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn write_requests_csv<W: Write>(mut w: W, requests: &[Request]) -> io::Result<()> {
    writeln!(
        w,
        "id,arrival,dispatch,prefill_start,first_token,completion,scheduler_wait,device_wait,ttft"
    )?;
    for r in requests {
        let ts = &r.timestamps;
        let lat = latency(r);
        let sched = ts.dispatch.map(|d| d.since(r.arrival_time) as f64 * 1e-9);
        let dev = match (ts.dispatch, ts.prefill_start) {
            (Some(d), Some(p)) => Some(p.since(d) as f64 * 1e-9),
            _ => None,
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.id.0,
            fmt_time(Some(r.arrival_time)),
            fmt_time(ts.dispatch),
            fmt_time(ts.prefill_start),
            fmt_time(ts.first_token),
            fmt_time(ts.completion),
            fmt_secs(sched),
            fmt_secs(dev),
            fmt_secs(lat.map(|l| l.ttft)),
        )?;
    }
    Ok(())
}

pub fn write_passes_csv<W: Write>(mut w: W, passes: &[PassRecord]) -> io::Result<()> {
    writeln!(w, "time,instance,dp,assigned_tokens,utilization")?;
    for p in passes {
        for (dp, &load) in p.loads.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{:.6}",
                fmt_time(Some(p.start)),
                p.instance,
                dp,
                load,
                chunk_utilization(load, p.c_chunk)
            )?;
        }
    }
    Ok(())
}

pub fn write_kvband_csv<W: Write>(mut w: W, samples: &[(SimTime, BandPoint)]) -> io::Result<()> {
    writeln!(w, "time,mean,lo,hi,min,max")?;
    for (t, b) in samples {
        writeln!(
            w,
            "{},{:.3},{:.3},{:.3},{:.0},{:.0}",
            fmt_time(Some(*t)),
            b.mean,
            b.lo(),
            b.hi(),
            b.min,
            b.max
        )?;
    }
    Ok(())
}

/// Counts of request outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OutcomeCounts {
    pub total: u64,
    pub completed: u64,
    pub rejected: u64,
    pub unfinished: u64,
}

pub fn count_outcomes(requests: &[Request]) -> OutcomeCounts {
    let mut c = OutcomeCounts {
        total: requests.len() as u64,
        ..OutcomeCounts::default()
    };
    for r in requests {
        match r.outcome {
            Outcome::Completed => c.completed += 1,
            Outcome::Rejected => c.rejected += 1,
            Outcome::InFlight => c.unfinished += 1,
        }
    }
    c
}
