//! The cluster simulation: event handlers wiring workload, schedulers and
//! mock engines together.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::baselines::BaselineDispatcher;
use crate::config::{CheckConfig, ConfigError, ExperimentConfig, Fault, Pipeline, SchedulerKind};
use crate::decode_alloc::DecodeAllocator;
use crate::engine::{DecodeExecutor, PrefillExecutor, PrefillWork};
use crate::interval::{acknowledge, arm_watchdog, expire_watchdog, readiness, rotation_target};
use crate::metrics::{
    count_outcomes, kv_band, mean_chunk_utilization, summarize_latency, write_kvband_csv, write_passes_csv,
    write_requests_csv, BandPoint, LatencySummary, OutcomeCounts, PassRecord, Window,
};
use crate::prefill_alloc::{allocate_batch, cache_hit};
use crate::simclock::{EventKind, EventQueue, Traced};
use crate::types::{
    new_cluster, secs_to_nanos, Cluster, DpId, InstanceId, Outcome, Request, RequestId, SimTime, Tokens,
};
use crate::workload::{workload_digest, WorkloadGenerator};

#[derive(Debug, Clone, PartialEq)]
pub enum Ev {
    Arrival(RequestId),
    Tick {
        generation: u64,
    },
    EndForward {
        instance: InstanceId,
    },
    Watchdog {
        instance: InstanceId,
        generation: u64,
    },
    Topology {
        instance: InstanceId,
        healthy: bool,
    },
    DecodeStep {
        instance: InstanceId,
    },
    Delivery {
        instance: InstanceId,
        items: Vec<(usize, PrefillWork)>,
    },
    Sample,
}

impl Traced for Ev {
    fn kind(&self) -> EventKind {
        match self {
            Ev::Arrival(_) => EventKind::RequestArrival,
            Ev::Tick { .. } => EventKind::ScheduleTick,
            Ev::EndForward { .. } => EventKind::EndForward,
            Ev::Watchdog { .. } => EventKind::WatchdogExpiry,
            Ev::Topology { .. } => EventKind::TopologyChange,
            Ev::DecodeStep { .. } => EventKind::DecodeStep,
            Ev::Delivery { .. } => EventKind::Delivery,
            Ev::Sample => EventKind::Sample,
        }
    }

    fn summary(&self) -> String {
        match self {
            Ev::Arrival(id) => id.to_string(),
            Ev::Tick { generation } => format!("gen={generation}"),
            Ev::EndForward { instance } | Ev::DecodeStep { instance } => format!("instance={instance}"),
            Ev::Watchdog { instance, generation } => format!("instance={instance} gen={generation}"),
            Ev::Topology { instance, healthy } => format!("instance={instance} healthy={healthy}"),
            Ev::Delivery { instance, items } => {
                let tokens: Tokens = items.iter().map(|(_, w)| w.tokens).sum();
                format!("instance={instance} requests={} tokens={tokens}", items.len())
            }
            Ev::Sample => String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Counters collected during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub events: u64,
    pub ticks: u64,
    /// Slots whose rotation target was not ready when the tick fired.
    pub deferred_slots: u64,
    /// Slots that found nothing to dispatch.
    pub empty_slots: u64,
    pub dispatches: u64,
    pub watchdog_expiries: u64,
    pub suppressed_end_forwards: u64,
    pub rejected_samples: u64,
    pub throttled: u64,
    pub decode_mask_events: u64,
    pub decode_fallback_events: u64,
    pub decode_steps: u64,
    pub prefill_passes: u64,
    pub final_t_fwd_bar: f64,
    pub final_i_opt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Throughput {
    pub completed_per_sec: f64,
    pub output_tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvSummary {
    /// Time-averaged across-unit standard deviation of KV load.
    pub mean_sigma: Option<f64>,
    pub mean_load: Option<f64>,
    pub mean_spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub scheduler: String,
    pub decode_scheduler: String,
    pub seed: u64,
    pub workload_digest: String,
    pub window: [f64; 2],
    pub outcomes: OutcomeCounts,
    pub latency: LatencySummary,
    pub mean_chunk_utilization: Option<f64>,
    pub throughput: Throughput,
    pub kv: KvSummary,
    pub stats: SimStats,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub requests: Vec<Request>,
    pub passes: Vec<PassRecord>,
    pub kv_samples: Vec<(SimTime, BandPoint)>,
    /// Dispatch instants per prefill instance.
    pub dispatch_log: Vec<Vec<SimTime>>,
    pub summary: Summary,
    pub trace: Option<String>,
}

impl RunResult {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        write_requests_csv(
            std::io::BufWriter::new(fs::File::create(dir.join("requests.csv"))?),
            &self.requests,
        )?;
        write_passes_csv(
            std::io::BufWriter::new(fs::File::create(dir.join("passes.csv"))?),
            &self.passes,
        )?;
        write_kvband_csv(
            std::io::BufWriter::new(fs::File::create(dir.join("kvband.csv"))?),
            &self.kv_samples,
        )?;
        let mut json = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        json.push('\n');
        fs::write(dir.join("summary.json"), json)?;
        if let Some(trace) = &self.trace {
            fs::write(dir.join("trace.tsv"), trace)?;
        }
        Ok(())
    }

    /// Violated bounds, as human-readable lines.
    pub fn check(&self, check: &CheckConfig) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(bound) = check.max_mean_ttft {
            match self.summary.latency.mean_ttft {
                Some(m) if m <= bound => {}
                m => out.push(format!("mean ttft {m:?} exceeds {bound}")),
            }
        }
        if let Some(bound) = check.min_chunk_utilization {
            match self.summary.mean_chunk_utilization {
                Some(u) if u >= bound => {}
                u => out.push(format!("chunk utilization {u:?} below {bound}")),
            }
        }
        if let Some(bound) = check.max_rejected {
            if self.summary.outcomes.rejected > bound {
                out.push(format!(
                    "{} rejected requests exceed {bound}",
                    self.summary.outcomes.rejected
                ));
            }
        }
        out
    }
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    queue: EventQueue<Ev>,
    requests: Vec<Request>,
    cluster: Cluster,
    prefill_exec: Vec<PrefillExecutor>,
    decode_exec: Vec<DecodeExecutor>,
    baseline: Option<BaselineDispatcher>,
    decode_alloc: DecodeAllocator,
    decode_pending: VecDeque<RequestId>,
    decode_remaining: Vec<Tokens>,
    generator: WorkloadGenerator,
    client_of: Vec<Option<usize>>,
    placement: Vec<Option<DpId>>,
    rotation: usize,
    tick_gen: u64,
    next_slot: Option<SimTime>,
    last_slot: Option<SimTime>,
    arrival_end: SimTime,
    end: SimTime,
    window: Window,
    open: usize,
    passes: Vec<PassRecord>,
    kv_samples: Vec<(SimTime, BandPoint)>,
    dispatch_log: Vec<Vec<SimTime>>,
    output_tokens_in_window: u64,
    completed_in_window: u64,
    stats: SimStats,
}

/// Runs one experiment to completion.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult, SimError> {
    cfg.validate()?;
    let cluster = new_cluster(&cfg.cluster)?;
    let mut generator = WorkloadGenerator::new(&cfg.workload, cfg.seed);
    let initial = generator.initial();
    let digest = workload_digest(&cfg.workload, cfg.seed, &initial);
    let closed = cfg.workload.is_closed_loop();
    let n_prefill = cluster.prefill.len();
    let mut queue = EventQueue::new();
    if cfg.run.trace {
        queue.enable_trace();
    }
    let arrival_end = SimTime::from_secs_f64(cfg.workload.duration);
    let mut sim = Sim {
        cfg,
        queue,
        client_of: (0..initial.len()).map(|i| closed.then_some(i)).collect(),
        placement: vec![None; initial.len()],
        decode_remaining: vec![0; initial.len()],
        requests: initial,
        prefill_exec: cluster
            .prefill
            .iter()
            .map(|i| PrefillExecutor::new(i.dp_degree()))
            .collect(),
        decode_exec: cluster
            .decode
            .iter()
            .map(|i| DecodeExecutor::new(i.dp_degree()))
            .collect(),
        baseline: (cfg.scheduler != SchedulerKind::Sbs).then(|| BaselineDispatcher::new(cfg.scheduler, n_prefill)),
        decode_alloc: DecodeAllocator::new(
            cfg.decode_scheduler,
            cfg.cluster.iqr_k,
            cfg.cluster.decode_sort_key,
            ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDEC0_DE00),
        ),
        cluster,
        decode_pending: VecDeque::new(),
        generator,
        rotation: 0,
        tick_gen: 0,
        next_slot: None,
        last_slot: None,
        arrival_end,
        end: arrival_end + secs_to_nanos(cfg.run.drain),
        window: Window::new(cfg.workload.duration, cfg.run.warmup_fraction),
        open: 0,
        passes: Vec::new(),
        kv_samples: Vec::new(),
        dispatch_log: vec![Vec::new(); n_prefill],
        output_tokens_in_window: 0,
        completed_in_window: 0,
        stats: SimStats::default(),
    };
    sim.seed_events();
    sim.run_loop();
    sim.finish(digest)
}

impl Sim<'_> {
    fn now(&self) -> SimTime {
        self.queue.now()
    }

    fn at(&mut self, t: SimTime, ev: Ev) {
        self.queue.schedule(t, ev).expect("event in the future");
    }

    fn sbs(&self) -> bool {
        self.cfg.scheduler == SchedulerKind::Sbs
    }

    fn uses_prefill(&self) -> bool {
        self.cfg.pipeline != Pipeline::DecodeOnly
    }

    fn uses_decode(&self) -> bool {
        self.cfg.pipeline != Pipeline::PrefillOnly
    }

    fn seed_events(&mut self) {
        for i in 0..self.requests.len() {
            let t = self.requests[i].arrival_time;
            self.at(t, Ev::Arrival(RequestId(i as u64)));
        }
        self.open = self.requests.len();
        for ev in &self.cfg.topology {
            let t = SimTime::from_secs_f64(ev.at);
            self.queue
                .schedule(
                    t,
                    Ev::Topology {
                        instance: ev.instance,
                        healthy: ev.healthy,
                    },
                )
                .expect("future");
        }
        if self.sbs() && self.uses_prefill() {
            self.schedule_slot(SimTime::ZERO);
        }
        if self.uses_decode() {
            self.at(SimTime::ZERO, Ev::Sample);
        }
    }

    fn run_loop(&mut self) {
        while let Some(ev) = self.queue.pop_until(self.end) {
            self.stats.events += 1;
            self.handle(ev.payload);
            if self.open == 0 && self.now() >= self.arrival_end {
                break;
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival(id) => self.on_arrival(id),
            Ev::Tick { generation } => {
                if generation == self.tick_gen {
                    self.stats.ticks += 1;
                    self.slot_due();
                }
            }
            Ev::EndForward { instance } => self.on_end_forward(instance),
            Ev::Watchdog { instance, generation } => {
                if expire_watchdog(&mut self.cluster.prefill[instance], generation) {
                    self.stats.watchdog_expiries += 1;
                    self.maybe_run_overdue_slot(instance);
                }
            }
            Ev::Topology { instance, healthy } => self.on_topology(instance, healthy),
            Ev::DecodeStep { instance } => self.on_decode_step(instance),
            Ev::Delivery { instance, items } => self.deliver(instance, &items),
            Ev::Sample => self.on_sample(),
        }
    }

    // ---- arrivals and dispatch ----

    fn on_arrival(&mut self, id: RequestId) {
        if !self.uses_prefill() {
            let now = self.now();
            let r = &mut self.requests[id.0 as usize];
            r.timestamps.dispatch = Some(now);
            r.timestamps.prefill_start = Some(now);
            self.decode_remaining[id.0 as usize] = r.output_len;
            self.enter_decode(id);
            return;
        }
        match &mut self.baseline {
            Some(b) => {
                let Some(dp) = b.pick(&self.cluster.prefill) else {
                    self.reject(id);
                    return;
                };
                let unit = &self.cluster.prefill[dp.instance].dp_units[dp.local];
                let req = &self.requests[id.0 as usize];
                let hit = cache_hit(req, unit, self.cfg.cluster.prefill_mode);
                let work = PrefillWork {
                    request: id,
                    tokens: req.prompt_len - hit,
                };
                self.dispatch(dp.instance, vec![(dp.local, work)]);
            }
            None => self.cluster.scheduler.arrivals.push_back(id),
        }
    }

    /// Sends work to `instance`: tokens enter `u_flight` now and reach the
    /// device after the network latency.
    fn dispatch(&mut self, instance: InstanceId, items: Vec<(usize, PrefillWork)>) {
        let now = self.now();
        for &(dp, work) in &items {
            self.cluster.prefill[instance].dp_units[dp].u_flight += work.tokens;
            let idx = work.request.0 as usize;
            self.requests[idx].timestamps.dispatch = Some(now);
            self.placement[idx] = Some(DpId::new(instance, dp));
        }
        self.stats.dispatches += 1;
        self.dispatch_log[instance].push(now);
        let l_net = self.cluster.scheduler.l_net;
        if l_net == 0 {
            self.deliver(instance, &items);
        } else {
            self.at(now + l_net, Ev::Delivery { instance, items });
        }
    }

    fn deliver(&mut self, instance: InstanceId, items: &[(usize, PrefillWork)]) {
        self.prefill_exec[instance].deliver(&mut self.cluster.prefill[instance], items);
        self.try_start_pass(instance);
    }

    fn try_start_pass(&mut self, instance: InstanceId) {
        let now = self.now();
        let exec = &mut self.prefill_exec[instance];
        let allow_empty = self.cfg.cluster.free_running && exec.has_started();
        let Some(plan) = exec.begin_pass(
            &mut self.cluster.prefill[instance],
            self.cfg.cluster.c_chunk,
            &self.cfg.cluster.engine,
            now,
            allow_empty,
        ) else {
            return;
        };
        let end = plan.end;
        for slice in plan.per_dp.iter().flatten().filter(|s| s.first) {
            let ts = &mut self.requests[slice.request.0 as usize].timestamps;
            ts.prefill_start.get_or_insert(now);
        }
        self.passes.push(PassRecord {
            start: now,
            instance,
            loads: plan.loads.clone(),
            c_chunk: self.cfg.cluster.c_chunk,
        });
        self.stats.prefill_passes += 1;
        self.at(end, Ev::EndForward { instance });
    }

    fn suppressed(&self, instance: InstanceId, t: SimTime) -> bool {
        self.cfg.faults.iter().any(|f| match *f {
            Fault::SuppressEndForward {
                from,
                until,
                instance: which,
            } => {
                let from = SimTime::from_secs_f64(from);
                let until = until.map(SimTime::from_secs_f64).unwrap_or(SimTime::MAX);
                t >= from && t < until && which.is_none_or(|w| w == instance)
            }
        })
    }

    fn on_end_forward(&mut self, instance: InstanceId) {
        let now = self.now();
        let (plan, signal) = self.prefill_exec[instance].finish_pass(&mut self.cluster.prefill[instance]);
        for (dp, slices) in plan.per_dp.iter().enumerate() {
            for s in slices.iter().filter(|s| s.last) {
                self.prefill_done(s.request, instance, dp);
            }
        }
        if self.suppressed(instance, now) {
            self.stats.suppressed_end_forwards += 1;
        } else if self.sbs() {
            if self
                .cluster
                .scheduler
                .on_end_forward(signal.measured_ns as i64)
                .is_err()
            {
                self.stats.rejected_samples += 1;
            }
            acknowledge(&mut self.cluster.prefill[instance]);
            self.rearm_slot();
            self.maybe_run_overdue_slot(instance);
        }
        self.try_start_pass(instance);
    }

    fn prefill_done(&mut self, id: RequestId, instance: InstanceId, dp: usize) {
        let now = self.now();
        let idx = id.0 as usize;
        self.requests[idx].timestamps.first_token = Some(now);
        if self.window.contains(now) {
            self.output_tokens_in_window += 1;
        }
        let prefix = std::mem::take(&mut self.requests[idx].prefix_tokens);
        self.cluster.prefill[instance].dp_units[dp].cache.insert(&prefix);
        self.requests[idx].prefix_tokens = prefix;
        let output = self.requests[idx].output_len;
        if self.cfg.pipeline == Pipeline::PrefillOnly || output <= 1 {
            self.complete(id);
        } else {
            self.decode_remaining[idx] = output - 1;
            self.enter_decode(id);
        }
    }

    // ---- SBS slots ----

    fn schedule_slot(&mut self, at: SimTime) {
        self.tick_gen += 1;
        self.next_slot = Some(at);
        let generation = self.tick_gen;
        self.at(at, Ev::Tick { generation });
    }

    /// Re-times a pending tick after the interval changed.
    fn rearm_slot(&mut self) {
        let (Some(next), Some(last)) = (self.next_slot, self.last_slot) else {
            return;
        };
        let now = self.now();
        if next <= now || self.cluster.scheduler.suspended {
            return;
        }
        let at = (last + self.cluster.scheduler.i_opt).max(now);
        if at != next {
            self.schedule_slot(at);
        }
    }

    fn slot_is_due(&self) -> bool {
        self.next_slot.is_some_and(|t| t <= self.now())
    }

    fn slot_due(&mut self) {
        if self.cluster.scheduler.suspended {
            self.next_slot = None;
            return;
        }
        let Some(target) = rotation_target(&self.cluster.prefill, self.rotation) else {
            self.next_slot = None;
            return;
        };
        if readiness(&self.cluster.prefill[target], self.now()).is_some() {
            self.run_slot(target);
        } else {
            self.stats.deferred_slots += 1;
        }
    }

    /// A due slot waiting on `instance` runs as soon as it becomes ready.
    fn maybe_run_overdue_slot(&mut self, instance: InstanceId) {
        if !self.sbs() || !self.slot_is_due() || self.cluster.scheduler.suspended {
            return;
        }
        if rotation_target(&self.cluster.prefill, self.rotation) == Some(instance)
            && readiness(&self.cluster.prefill[instance], self.now()).is_some()
        {
            self.run_slot(instance);
        }
    }

    fn run_slot(&mut self, target: InstanceId) {
        let now = self.now();
        let sched = &mut self.cluster.scheduler;
        let pending: Vec<RequestId> = sched.pending.drain(..).collect();
        let arrivals: Vec<RequestId> = sched.arrivals.drain(..).collect();
        let (result, flow) = allocate_batch(
            &mut self.requests,
            &pending,
            &arrivals,
            &self.cluster.prefill[target].dp_units,
            self.cfg.cluster.n_limit,
            self.cfg.cluster.prefill_mode,
        );
        self.cluster.scheduler.pending = result.deferred.into_iter().collect();
        if let Some(flow) = flow {
            for id in flow.throttled {
                self.stats.throttled += 1;
                self.reject(id);
            }
        }
        if result.mapping.is_empty() {
            self.stats.empty_slots += 1;
        } else {
            let items = result
                .mapping
                .iter()
                .map(|a| {
                    (
                        a.unit,
                        PrefillWork {
                            request: a.request,
                            tokens: a.tokens,
                        },
                    )
                })
                .collect();
            let t_bar = self.cluster.scheduler.t_fwd_bar;
            let (deadline, generation) = arm_watchdog(
                &mut self.cluster.prefill[target],
                now,
                t_bar,
                self.cfg.cluster.watchdog_multiplier,
            );
            self.at(
                deadline,
                Ev::Watchdog {
                    instance: target,
                    generation,
                },
            );
            self.dispatch(target, items);
        }
        self.rotation = (target + 1) % self.cluster.prefill.len();
        self.last_slot = Some(now);
        let next = now + self.cluster.scheduler.i_opt;
        self.schedule_slot(next);
    }

    fn on_topology(&mut self, instance: InstanceId, healthy: bool) {
        self.cluster.prefill[instance].healthy = healthy;
        let n = self.cluster.prefill.iter().filter(|i| i.healthy).count();
        let was_suspended = self.cluster.scheduler.suspended;
        self.cluster.scheduler.on_topology_change(n);
        if !self.sbs() || !self.uses_prefill() {
            return;
        }
        if self.cluster.scheduler.suspended {
            self.tick_gen += 1;
            self.next_slot = None;
        } else if was_suspended || self.next_slot.is_none() {
            let now = self.now();
            self.schedule_slot(now);
        } else if self.slot_is_due() {
            // The overdue target may be the instance that just left.
            self.slot_due();
        } else {
            self.rearm_slot();
        }
    }

    // ---- decode ----

    fn enter_decode(&mut self, id: RequestId) {
        let idx = id.0 as usize;
        if self.decode_remaining[idx] == 0 {
            let now = self.now();
            self.requests[idx].timestamps.first_token.get_or_insert(now);
            self.complete(id);
            return;
        }
        self.decode_pending.push_back(id);
        if self.decode_exec.iter().all(|e| !e.is_stepping()) {
            self.allocate_decode();
        }
    }

    fn allocate_decode(&mut self) {
        if self.decode_pending.is_empty() {
            return;
        }
        let healthy: Vec<usize> = (0..self.cluster.decode.len())
            .filter(|&i| self.cluster.decode[i].healthy)
            .collect();
        let units: Vec<crate::types::DpUnitState> = healthy
            .iter()
            .flat_map(|&i| self.cluster.decode[i].dp_units.iter().cloned())
            .collect();
        let ids: Vec<RequestId> = self.decode_pending.drain(..).collect();
        let reqs: Vec<&Request> = ids.iter().map(|id| &self.requests[id.0 as usize]).collect();
        let plan = self.decode_alloc.schedule(&reqs, &units);
        self.stats.decode_mask_events += plan.mask_events;
        self.stats.decode_fallback_events += plan.fallback_events;
        for (id, flat) in plan.assignments {
            let dp = units[flat].dp_id;
            let prompt = self.requests[id.0 as usize].prompt_len;
            let unit = &mut self.cluster.decode[dp.instance].dp_units[dp.local];
            unit.batch_size += 1;
            unit.kv_load += prompt;
            self.decode_exec[dp.instance].admit(dp.local, id, prompt, self.decode_remaining[id.0 as usize]);
        }
        for i in healthy {
            self.start_decode_step(i);
        }
    }

    fn start_decode_step(&mut self, instance: InstanceId) {
        let now = self.now();
        if let Some(end) =
            self.decode_exec[instance].begin_step(&self.cluster.decode[instance], &self.cfg.cluster.engine, now)
        {
            self.at(end, Ev::DecodeStep { instance });
        }
    }

    fn on_decode_step(&mut self, instance: InstanceId) {
        let now = self.now();
        self.stats.decode_steps += 1;
        let out = self.decode_exec[instance]
            .finish_step(&mut self.cluster.decode[instance], self.cfg.cluster.tokens_per_step);
        let in_window = self.window.contains(now);
        for (id, gain) in out.advanced {
            self.requests[id.0 as usize].timestamps.first_token.get_or_insert(now);
            if in_window {
                self.output_tokens_in_window += gain;
            }
        }
        for id in out.completed {
            self.complete(id);
        }
        self.allocate_decode();
        self.start_decode_step(instance);
    }

    fn on_sample(&mut self) {
        let loads: Vec<Tokens> = self
            .cluster
            .decode
            .iter()
            .flat_map(|i| i.dp_units.iter().map(|u| u.kv_load))
            .collect();
        let now = self.now();
        self.kv_samples.push((now, kv_band(&loads)));
        let next = now + secs_to_nanos(self.cfg.run.sample_interval);
        if next <= self.end {
            self.at(next, Ev::Sample);
        }
    }

    // ---- completion ----

    fn complete(&mut self, id: RequestId) {
        let now = self.now();
        let r = &mut self.requests[id.0 as usize];
        r.timestamps.completion = Some(now);
        r.outcome = Outcome::Completed;
        if self.window.contains(now) {
            self.completed_in_window += 1;
        }
        self.close(id);
    }

    fn reject(&mut self, id: RequestId) {
        self.requests[id.0 as usize].outcome = Outcome::Rejected;
        self.close(id);
    }

    fn close(&mut self, id: RequestId) {
        self.open -= 1;
        let Some(client) = self.client_of[id.0 as usize] else {
            return;
        };
        let at = self.now() + self.generator.think_ns();
        if at >= self.arrival_end {
            return;
        }
        let new_id = RequestId(self.requests.len() as u64);
        let req = self.generator.next_for_client(client, new_id, at);
        self.requests.push(req);
        self.client_of.push(Some(client));
        self.placement.push(None);
        self.decode_remaining.push(0);
        self.open += 1;
        self.at(at, Ev::Arrival(new_id));
    }

    // ---- wrap-up ----

    fn verify(&self) -> Result<(), SimError> {
        for r in &self.requests {
            if !r.timestamps.is_monotone(r.arrival_time) {
                return Err(SimError::Invariant(format!("{} has non-monotone timestamps", r.id)));
            }
            if r.outcome == Outcome::Completed && r.timestamps.first_token.is_none() {
                return Err(SimError::Invariant(format!("{} completed without a first token", r.id)));
            }
        }
        let open = self.requests.iter().filter(|r| r.outcome == Outcome::InFlight).count();
        if open != self.open {
            return Err(SimError::Invariant(format!("open count {} != {open}", self.open)));
        }
        for inst in self.cluster.prefill.iter().chain(&self.cluster.decode) {
            for u in &inst.dp_units {
                if u.c_avail() + u.u_flight as i64 + u.r_queued as i64 != u.c_chunk() as i64 {
                    return Err(SimError::Invariant(format!("headroom identity broken on {}", u.dp_id)));
                }
            }
        }
        Ok(())
    }

    fn finish(mut self, digest: String) -> Result<RunResult, SimError> {
        self.verify()?;
        self.stats.final_t_fwd_bar = self.cluster.scheduler.t_fwd_bar as f64 * 1e-9;
        self.stats.final_i_opt = self.cluster.scheduler.i_opt as f64 * 1e-9;
        let window = self.window;
        let in_window: Vec<&(SimTime, BandPoint)> =
            self.kv_samples.iter().filter(|(t, _)| window.contains(*t)).collect();
        let avg = |f: fn(&BandPoint) -> f64| {
            (!in_window.is_empty()).then(|| in_window.iter().map(|(_, b)| f(b)).sum::<f64>() / in_window.len() as f64)
        };
        let kv = KvSummary {
            mean_sigma: avg(|b| b.sigma),
            mean_load: avg(|b| b.mean),
            mean_spread: avg(|b| b.max - b.min),
        };
        let summary = Summary {
            name: self.cfg.name.clone(),
            scheduler: self.cfg.scheduler.name().to_string(),
            decode_scheduler: self.cfg.decode_scheduler.name().to_string(),
            seed: self.cfg.seed,
            workload_digest: digest,
            window: [window.start.as_secs_f64(), window.end.as_secs_f64()],
            outcomes: count_outcomes(&self.requests),
            latency: summarize_latency(&self.requests, window),
            mean_chunk_utilization: mean_chunk_utilization(&self.passes, window),
            throughput: Throughput {
                completed_per_sec: self.completed_in_window as f64 / window.secs(),
                output_tokens_per_sec: self.output_tokens_in_window as f64 / window.secs(),
            },
            kv,
            stats: self.stats.clone(),
            config: serde_json::to_value(self.cfg).expect("config serializes"),
        };
        Ok(RunResult {
            trace: self.queue.take_trace(),
            requests: self.requests,
            passes: self.passes,
            kv_samples: self.kv_samples,
            dispatch_log: self.dispatch_log,
            summary,
        })
    }
}
