use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbs_core::experiment::{write_json, ExperimentError};
use sbs_core::{compare, find_peak_qps, parse_load_list, parse_scheduler_list, run, sweep, ExperimentConfig, SimError};
use tracing_subscriber::EnvFilter;

const EXIT_CONFIG: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "sbs", version, about = "Run staggered batch scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write CSVs plus summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run at percentages of the immediate-dispatch peak rate.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated load percentages.
        #[arg(long, default_value = "40,60,80,100")]
        loads: String,
    },
    /// Run one workload under several schedulers.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated scheduler names.
        #[arg(long, default_value = "sbs,immediate")]
        schedulers: String,
    },
    /// Find the highest arrival rate meeting a mean-TTFT bound.
    Peak {
        #[command(flatten)]
        common: Common,
        /// Mean TTFT bound in seconds; defaults to the config's `peak.slo_ttft`.
        #[arg(long)]
        slo_ttft: Option<f64>,
        /// Also write peak.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Config(_) => EXIT_CONFIG,
            SimError::Invariant(_) => EXIT_INVARIANT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Sim(s) => s.into(),
            ExperimentError::Unattainable { .. } => Failure {
                code: EXIT_CHECK,
                message: e.to_string(),
            },
            ExperimentError::ClosedLoop | ExperimentError::Io(_) => Failure::config(e),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .map_err(|e| Failure::config(format!("{}: {e}", common.config.display())))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::config(format!("{}: {e}", path.display()))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { common, out } => {
            let cfg = load(&common)?;
            let result = run(&cfg)?;
            result.write_to(&out).map_err(io(&out))?;
            let s = &result.summary;
            println!(
                "{}: {} requests, mean ttft {}, chunk utilization {}",
                s.scheduler,
                s.outcomes.total,
                fmt_opt(s.latency.mean_ttft),
                fmt_opt(s.mean_chunk_utilization)
            );
            if let Some(check) = &cfg.check {
                let violations = result.check(check);
                if !violations.is_empty() {
                    return Err(Failure {
                        code: EXIT_CHECK,
                        message: violations.join("; "),
                    });
                }
            }
            Ok(())
        }
        Command::Sweep { common, out, loads } => {
            let cfg = load(&common)?;
            let loads = parse_load_list(&loads).map_err(|e| Failure::config(format!("--loads: {e}")))?;
            let report = sweep(&cfg, &loads, &out)?;
            println!("baseline peak {:.3} req/s", report.baseline_peak.peak);
            for p in &report.points {
                println!(
                    "{:>6}% {:>9.3} req/s  mean ttft {}",
                    p.load_percent,
                    p.rate,
                    fmt_opt(p.mean_ttft)
                );
            }
            Ok(())
        }
        Command::Compare {
            common,
            out,
            schedulers,
        } => {
            let cfg = load(&common)?;
            let kinds = parse_scheduler_list(&schedulers).map_err(|e| Failure::config(format!("--schedulers: {e}")))?;
            for s in compare(&cfg, &kinds, &out)? {
                println!(
                    "{:<18} mean ttft {}  device wait {}  chunk utilization {}",
                    s.scheduler,
                    fmt_opt(s.latency.mean_ttft),
                    fmt_opt(s.latency.mean_device_wait),
                    fmt_opt(s.mean_chunk_utilization)
                );
            }
            Ok(())
        }
        Command::Peak { common, slo_ttft, out } => {
            let cfg = load(&common)?;
            let slo = slo_ttft.unwrap_or(cfg.peak.slo_ttft);
            if slo.is_nan() || slo <= 0.0 {
                return Err(Failure::config("--slo-ttft must be positive"));
            }
            let peak = find_peak_qps(&cfg, slo)?;
            if let Some(dir) = out {
                let path = dir.join("peak.json");
                write_json(&path, &peak).map_err(io(&path))?;
            }
            println!("{:.3}", peak.peak);
            Ok(())
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("error")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
