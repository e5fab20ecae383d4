//! Multi-run procedures: peak-rate search, load sweeps and scheduler
//! comparisons on a shared workload.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ExperimentConfig, SchedulerKind};
use crate::sim::{run, RunResult, SimError, Summary};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("peak search needs an open-loop arrival process")]
    ClosedLoop,
    #[error("SLO of {slo} s is not met even at the minimum rate {min_rate} req/s")]
    Unattainable { slo: f64, min_rate: f64 },
    #[error("cannot write results: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ListError {
    #[error("empty list")]
    Empty,
    #[error("invalid entry {0:?}")]
    Invalid(String),
    #[error("duplicate entry {0:?}")]
    Duplicate(String),
}

/// Parses a comma-separated list of load percentages, e.g. `40,60,80,100`.
pub fn parse_load_list(s: &str) -> Result<Vec<f64>, ListError> {
    let mut out: Vec<f64> = Vec::new();
    for item in s.split(',').map(str::trim) {
        if item.is_empty() {
            continue;
        }
        let v: f64 = item.parse().map_err(|_| ListError::Invalid(item.to_string()))?;
        if !(v.is_finite() && v > 0.0 && v <= 1000.0) {
            return Err(ListError::Invalid(item.to_string()));
        }
        if out.contains(&v) {
            return Err(ListError::Duplicate(item.to_string()));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(ListError::Empty);
    }
    Ok(out)
}

/// Parses a comma-separated list of scheduler names, e.g. `sbs,immediate`.
pub fn parse_scheduler_list(s: &str) -> Result<Vec<SchedulerKind>, ListError> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim) {
        if item.is_empty() {
            continue;
        }
        let k = SchedulerKind::parse(item).ok_or_else(|| ListError::Invalid(item.to_string()))?;
        if out.contains(&k) {
            return Err(ListError::Duplicate(item.to_string()));
        }
        out.push(k);
    }
    if out.is_empty() {
        return Err(ListError::Empty);
    }
    Ok(out)
}

/// One probed rate during a peak search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub rate: f64,
    pub mean_ttft: Option<f64>,
    pub dropped_fraction: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakResult {
    pub scheduler: String,
    pub slo_ttft: f64,
    pub peak: f64,
    pub probes: Vec<Probe>,
}

/// Runs `cfg` at `rate` and judges it against the SLO.
pub fn probe(cfg: &ExperimentConfig, rate: f64, slo_ttft: f64) -> Result<Probe, ExperimentError> {
    let mut c = cfg.clone();
    c.workload = cfg.workload.with_rate(rate);
    let result = run(&c)?;
    let o = &result.summary.outcomes;
    let dropped_fraction = if o.total == 0 {
        0.0
    } else {
        (o.rejected + o.unfinished) as f64 / o.total as f64
    };
    let mean_ttft = result.summary.latency.mean_ttft;
    let feasible = mean_ttft.is_some_and(|m| m <= slo_ttft) && dropped_fraction <= cfg.peak.max_dropped_fraction;
    Ok(Probe {
        rate,
        mean_ttft,
        dropped_fraction,
        feasible,
    })
}

/// Highest arrival rate meeting the mean-TTFT SLO, by bisection over
/// `[peak.min_rate, peak.max_rate]` down to `peak.resolution`.
pub fn find_peak_qps(cfg: &ExperimentConfig, slo_ttft: f64) -> Result<PeakResult, ExperimentError> {
    if cfg.workload.rate().is_none() {
        return Err(ExperimentError::ClosedLoop);
    }
    let p = &cfg.peak;
    let mut probes = Vec::new();
    let result = |peak, probes| PeakResult {
        scheduler: cfg.scheduler.name().to_string(),
        slo_ttft,
        peak,
        probes,
    };
    let lo_probe = probe(cfg, p.min_rate, slo_ttft)?;
    let lo_ok = lo_probe.feasible;
    probes.push(lo_probe);
    if !lo_ok {
        return Err(ExperimentError::Unattainable {
            slo: slo_ttft,
            min_rate: p.min_rate,
        });
    }
    let hi_probe = probe(cfg, p.max_rate, slo_ttft)?;
    let hi_ok = hi_probe.feasible;
    probes.push(hi_probe);
    if hi_ok {
        return Ok(result(p.max_rate, probes));
    }
    let (mut lo, mut hi) = (p.min_rate, p.max_rate);
    while hi - lo > p.resolution {
        let mid = 0.5 * (lo + hi);
        let pr = probe(cfg, mid, slo_ttft)?;
        if pr.feasible {
            lo = mid;
        } else {
            hi = mid;
        }
        probes.push(pr);
    }
    Ok(result(lo, probes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub load_percent: f64,
    pub rate: f64,
    pub directory: String,
    pub mean_ttft: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    /// Peak of the immediate-dispatch baseline the loads are relative to.
    pub baseline_peak: PeakResult,
    pub points: Vec<SweepPoint>,
}

fn load_dir_name(load: f64) -> String {
    format!("load_{}", load.to_string().replace('.', "_"))
}

/// Measures the immediate-dispatch peak under `cfg.peak.slo_ttft`, then runs
/// `cfg` at each percentage of it, writing one directory per load.
pub fn sweep(cfg: &ExperimentConfig, loads: &[f64], out: &Path) -> Result<SweepReport, ExperimentError> {
    let mut base = cfg.clone();
    base.scheduler = SchedulerKind::Immediate;
    let baseline_peak = find_peak_qps(&base, cfg.peak.slo_ttft)?;
    let mut points = Vec::new();
    for &load in loads {
        let rate = baseline_peak.peak * load / 100.0;
        let mut c = cfg.clone();
        c.workload = cfg.workload.with_rate(rate);
        let result = run(&c)?;
        let dir = load_dir_name(load);
        result.write_to(&out.join(&dir))?;
        points.push(SweepPoint {
            load_percent: load,
            rate,
            directory: dir,
            mean_ttft: result.summary.latency.mean_ttft,
        });
    }
    let report = SweepReport { baseline_peak, points };
    write_json(&out.join("sweep.json"), &report)?;
    Ok(report)
}

/// Runs the same workload under each scheduler into `out/<scheduler>/`.
pub fn compare(
    cfg: &ExperimentConfig,
    schedulers: &[SchedulerKind],
    out: &Path,
) -> Result<Vec<Summary>, ExperimentError> {
    let mut summaries = Vec::new();
    for &k in schedulers {
        let mut c = cfg.clone();
        c.scheduler = k;
        let result: RunResult = run(&c)?;
        result.write_to(&out.join(k.name()))?;
        summaries.push(result.summary);
    }
    Ok(summaries)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    std::fs::write(path, s)
}
