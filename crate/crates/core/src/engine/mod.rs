//! Discrete-event serving simulator.
//!
//! One engine runs continuous batching over a fixed number of slots. At
//! every batch boundary it promotes finished prefetches, admits queued
//! requests (loading their adapters on demand, which stalls the step until
//! the transfer lands), and issues prefetches for the latest forecast.
//! Forecast rounds, metric samples, transfers and compaction are ordinary
//! events in the same queue, ordered by time and then insertion.

pub mod link;
pub mod metrics;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterId, Catalog};
use crate::memory::{AdapterMemory, AllocatorKind, MemoryError};
use crate::predictor::{
    evaluate_accuracy, IntervalForecast, OnlinePredictor, OraclePredictor, Prediction,
    PredictorConfig, PredictorError,
};
use crate::prefetch::{
    evict_until, eviction_order, promote_staged, select_prefetch, PrefetchPolicy, ResidencyState,
    Status,
};
use crate::workload::Request;
use crate::{ms_to_us, us_to_ms, Micros, US_PER_S};
pub use link::{Link, Priority};
pub use metrics::{
    Action, Decision, LatencySummary, MetricsReport, OverheadBreakdown, RequestOutcome,
    TimeseriesRow, SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("request {id} names adapter {adapter} outside the catalog")]
    UnknownAdapter { id: u64, adapter: AdapterId },
    #[error("requests are not sorted by arrival time")]
    Unsorted,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub pcie_bandwidth_bytes_per_s: f64,
    pub transfer_base_latency_ms: f64,
    pub prefill_base_ms: f64,
    pub prefill_per_token_ms: f64,
    pub decode_ms_per_token: f64,
    /// Decode slowdown at full occupancy: step time is
    /// `decode_ms_per_token * (1 + factor * running / slots)`.
    pub decode_occupancy_factor: f64,
    pub batch_slots: usize,
    pub predictor_overhead_ms: f64,
    pub page_table_overhead_ms: f64,
    pub prefetch_sched_overhead_ms: f64,
    pub compaction_ms_per_page: f64,
    pub prediction_cadence_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            pcie_bandwidth_bytes_per_s: 4e9,
            transfer_base_latency_ms: 2.0,
            prefill_base_ms: 5.0,
            prefill_per_token_ms: 0.1,
            decode_ms_per_token: 30.0,
            decode_occupancy_factor: 0.7,
            batch_slots: 32,
            predictor_overhead_ms: 2.3,
            page_table_overhead_ms: 0.4,
            prefetch_sched_overhead_ms: 0.8,
            compaction_ms_per_page: 0.05,
            prediction_cadence_ms: 100.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            (
                "pcie_bandwidth_bytes_per_s",
                self.pcie_bandwidth_bytes_per_s,
            ),
            ("decode_ms_per_token", self.decode_ms_per_token),
            ("prediction_cadence_ms", self.prediction_cadence_ms),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(EngineError::InvalidConfig(format!(
                    "cost.{k} must be positive"
                )));
            }
        }
        let nonneg = [
            ("transfer_base_latency_ms", self.transfer_base_latency_ms),
            ("prefill_base_ms", self.prefill_base_ms),
            ("prefill_per_token_ms", self.prefill_per_token_ms),
            ("decode_occupancy_factor", self.decode_occupancy_factor),
            ("predictor_overhead_ms", self.predictor_overhead_ms),
            ("page_table_overhead_ms", self.page_table_overhead_ms),
            (
                "prefetch_sched_overhead_ms",
                self.prefetch_sched_overhead_ms,
            ),
            ("compaction_ms_per_page", self.compaction_ms_per_page),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(EngineError::InvalidConfig(format!(
                    "cost.{k} must be nonnegative"
                )));
            }
        }
        if self.batch_slots == 0 {
            return Err(EngineError::InvalidConfig(
                "cost.batch_slots must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn prefill_us(&self, input_tokens: u32) -> Micros {
        ms_to_us(self.prefill_base_ms + self.prefill_per_token_ms * input_tokens as f64)
    }

    pub fn decode_step_us(&self, running: usize) -> Micros {
        let occ = running as f64 / self.batch_slots as f64;
        ms_to_us(self.decode_ms_per_token * (1.0 + self.decode_occupancy_factor * occ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Load on demand, evict by recency and frequency only.
    Reactive,
    /// LSTM forecasts feed eviction scores and, optionally, prefetching.
    Predictive,
    /// Forecasts come from the future request stream.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub prefetch: bool,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_s: f64,
    pub freq_half_life_s: f64,
    /// Share of the pool that prefetches in flight or awaiting promotion may
    /// occupy.
    pub staging_fraction: f64,
    pub oracle_lookahead_s: f64,
    /// Also prefetch adapters of queued requests that did not fit into the
    /// current batch, ahead of forecast picks.
    #[serde(default = "yes")]
    pub prefetch_queued: bool,
}

/// Which residents a load may evict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Victims {
    /// Demand loads: anything idle.
    Any,
    /// Loads for queued requests: idle and not needed by the queue.
    Unqueued,
    /// Forecast prefetches: additionally predicted cold.
    Cold,
}

fn yes() -> bool {
    true
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let p = PrefetchPolicy::default();
        Self {
            kind: PolicyKind::Predictive,
            prefetch: true,
            theta: p.theta,
            alpha: p.alpha,
            beta: p.beta,
            gamma: p.gamma,
            tau_s: p.tau_s,
            freq_half_life_s: p.freq_half_life_s,
            staging_fraction: 0.1,
            oracle_lookahead_s: 1.0,
            prefetch_queued: true,
        }
    }
}

impl PolicyConfig {
    pub fn prefetch_enabled(&self) -> bool {
        self.prefetch && self.kind != PolicyKind::Reactive
    }

    pub fn to_policy(&self, pool_bytes: u64) -> PrefetchPolicy {
        PrefetchPolicy {
            theta: self.theta,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            tau_s: self.tau_s,
            freq_half_life_s: self.freq_half_life_s,
            staging_capacity_bytes: (pool_bytes as f64 * self.staging_fraction).floor() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocatorConfig {
    pub kind: AllocatorKind,
    pub page_size_bytes: u64,
    pub pool_bytes: u64,
    /// Idle compaction runs when the scattered share of pages exceeds this.
    pub compaction_threshold: f64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            kind: AllocatorKind::Paged,
            page_size_bytes: crate::memory::DEFAULT_PAGE_SIZE,
            pool_bytes: 4 << 30,
            compaction_threshold: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    pub metrics_tick_ms: f64,
    /// Cold-start medians, hit rate, accuracy and memory averages ignore the
    /// first `warmup_s` seconds.
    pub warmup_s: f64,
    /// Stop at this simulated time instead of draining every request.
    pub horizon_s: Option<f64>,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            metrics_tick_ms: 1000.0,
            warmup_s: 300.0,
            horizon_s: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EngineConfig {
    pub seed: u64,
    pub policy: PolicyConfig,
    pub predictor: PredictorConfig,
    pub allocator: AllocatorConfig,
    pub cost: CostModel,
    pub options: RunOptions,
}

impl EngineConfig {
    /// Short name such as `predictive+prefetch+paged`.
    pub fn label(&self) -> String {
        let kind = match self.policy.kind {
            PolicyKind::Reactive => "reactive",
            PolicyKind::Predictive => "predictive",
            PolicyKind::Oracle => "oracle",
        };
        let alloc = match self.allocator.kind {
            AllocatorKind::Paged => "paged",
            AllocatorKind::Block => "block",
        };
        if self.policy.prefetch_enabled() {
            format!("{kind}+prefetch+{alloc}")
        } else {
            format!("{kind}+{alloc}")
        }
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<(), EngineError> {
        self.cost.validate()?;
        self.predictor.validate()?;
        if self.policy.kind != PolicyKind::Reactive {
            self.policy
                .to_policy(self.allocator.pool_bytes)
                .validate()
                .map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.policy.staging_fraction) {
            return Err(EngineError::InvalidConfig(
                "policy.staging_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.policy.oracle_lookahead_s > 0.0) {
            return Err(EngineError::InvalidConfig(
                "policy.oracle_lookahead_s must be positive".into(),
            ));
        }
        if !(self.options.metrics_tick_ms > 0.0) || !(self.options.warmup_s >= 0.0) {
            return Err(EngineError::InvalidConfig(
                "output.metrics_tick_ms must be positive and output.warmup_s nonnegative".into(),
            ));
        }
        if let Some(h) = self.options.horizon_s {
            if !(h > 0.0) {
                return Err(EngineError::InvalidConfig(
                    "horizon_s must be positive".into(),
                ));
            }
        }
        let mem = AdapterMemory::new(
            self.allocator.kind,
            self.allocator.pool_bytes,
            self.allocator.page_size_bytes,
        )?;
        let largest = catalog.iter().map(|a| mem.footprint(a)).max().unwrap_or(0);
        if largest > mem.capacity_bytes() {
            return Err(EngineError::InvalidConfig(format!(
                "allocator.pool_bytes ({}) is smaller than the largest adapter ({largest} bytes)",
                mem.capacity_bytes()
            )));
        }
        Ok(())
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: MetricsReport,
    pub outcomes: Vec<RequestOutcome>,
    pub timeseries: Vec<TimeseriesRow>,
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Arrival(usize),
    LinkTick(u64),
    TransferDone(AdapterId),
    BatchComplete,
    PredictionRound,
    MetricsTick,
    CompactionDone,
    /// Boundary for an idle engine, after every event at the same instant.
    Kick,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Micros,
    seq: u64,
    kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    /// Admitted requests wait for their adapters before the step starts.
    Loading,
    Running,
    Compacting,
}

#[derive(Debug, Clone, Copy)]
struct Admitted {
    req: usize,
    admit_us: Micros,
    cold: bool,
}

#[derive(Debug, Clone, Copy)]
struct Running {
    req: usize,
    first_token_us: Micros,
    remaining: u32,
    outcome_partial: Partial,
}

#[derive(Debug, Clone, Copy)]
struct Partial {
    cold: bool,
    cold_us: Micros,
    queue_us: Micros,
    prefill_us: Micros,
}

enum Forecaster {
    None,
    Lstm(Box<OnlinePredictor>),
    Oracle(OraclePredictor),
}

struct Sim<'a> {
    cfg: &'a EngineConfig,
    catalog: &'a Catalog,
    requests: &'a [Request],
    policy: PrefetchPolicy,

    now: Micros,
    seq: u64,
    events: BinaryHeap<Reverse<Event>>,
    next_arrival: usize,

    phase: Phase,
    waiting: VecDeque<usize>,
    admitted: Vec<Admitted>,
    pending_loads: BTreeSet<AdapterId>,
    running: Vec<Running>,
    step_decoding: usize,
    kick_pending: bool,
    busy: Vec<u32>,
    /// Adapters of queued requests, protected from prefetch evictions.
    wanted: BTreeSet<AdapterId>,
    ready_at: Vec<Micros>,
    resident_at_arrival: Vec<bool>,

    memory: AdapterMemory,
    residency: ResidencyState,
    link: Link,
    link_gen: u64,
    staged_bytes: u64,

    forecaster: Forecaster,
    latest: Vec<Prediction>,
    forecasts: Vec<IntervalForecast>,
    last_forecast_interval: Option<u64>,
    interval_us: Micros,

    outcomes: Vec<RequestOutcome>,
    timeseries: Vec<TimeseriesRow>,
    decisions: Vec<Decision>,
    report: MetricsReport,
    pred_us: Micros,
    prefetch_us: Micros,
    page_table_us: Micros,
    end_us: Micros,
}

/// Simulates `requests` (sorted by arrival) against `catalog`.
pub fn run(
    cfg: &EngineConfig,
    catalog: &Catalog,
    requests: &[Request],
) -> Result<RunResult, EngineError> {
    cfg.validate(catalog)?;
    for r in requests {
        if catalog.get(r.adapter).is_none() {
            return Err(EngineError::UnknownAdapter {
                id: r.id,
                adapter: r.adapter,
            });
        }
    }
    if requests
        .windows(2)
        .any(|w| w[0].arrival_us > w[1].arrival_us)
    {
        return Err(EngineError::Unsorted);
    }
    let memory = AdapterMemory::new(
        cfg.allocator.kind,
        cfg.allocator.pool_bytes,
        cfg.allocator.page_size_bytes,
    )?;
    let forecaster = match cfg.policy.kind {
        PolicyKind::Reactive => Forecaster::None,
        PolicyKind::Predictive => Forecaster::Lstm(Box::new(OnlinePredictor::new(
            cfg.predictor.clone(),
            cfg.seed,
        )?)),
        PolicyKind::Oracle => Forecaster::Oracle(OraclePredictor::new(
            requests,
            ms_to_us(cfg.policy.oracle_lookahead_s * 1000.0),
        )),
    };
    let n = catalog.len();
    let mut sim = Sim {
        cfg,
        catalog,
        requests,
        policy: cfg.policy.to_policy(memory.capacity_bytes()),
        now: 0,
        seq: 0,
        events: BinaryHeap::new(),
        next_arrival: 0,
        phase: Phase::Idle,
        waiting: VecDeque::new(),
        admitted: Vec::new(),
        pending_loads: BTreeSet::new(),
        running: Vec::new(),
        step_decoding: 0,
        kick_pending: false,
        busy: vec![0; n],
        wanted: BTreeSet::new(),
        ready_at: vec![0; n],
        resident_at_arrival: vec![false; requests.len()],
        link: Link::new(
            cfg.cost.pcie_bandwidth_bytes_per_s,
            ms_to_us(cfg.cost.transfer_base_latency_ms),
        ),
        memory,
        residency: ResidencyState::new(n),
        link_gen: 0,
        staged_bytes: 0,
        forecaster,
        latest: Vec::new(),
        forecasts: Vec::new(),
        last_forecast_interval: None,
        interval_us: cfg.predictor.interval_us(),
        outcomes: Vec::with_capacity(requests.len()),
        timeseries: Vec::new(),
        decisions: Vec::new(),
        report: MetricsReport {
            schema_version: SCHEMA_VERSION,
            label: cfg.label(),
            seed: cfg.seed,
            requests: requests.len() as u64,
            ..MetricsReport::default()
        },
        pred_us: 0,
        prefetch_us: 0,
        page_table_us: 0,
        end_us: 0,
    };
    sim.execute();
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: Micros, kind: EventKind) {
        debug_assert!(time >= self.now);
        self.seq += 1;
        self.events.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
    }

    fn schedule_next_arrival(&mut self) {
        if let Some(r) = self.requests.get(self.next_arrival) {
            self.push(r.arrival_us, EventKind::Arrival(self.next_arrival));
            self.next_arrival += 1;
        }
    }

    fn done(&self) -> bool {
        self.next_arrival >= self.requests.len()
            && self.waiting.is_empty()
            && self.running.is_empty()
            && self.admitted.is_empty()
            && matches!(self.phase, Phase::Idle | Phase::Compacting)
            && self.outcomes.len() == self.requests.len()
            && !self.kick_pending
    }

    fn horizon_us(&self) -> Option<Micros> {
        self.cfg.options.horizon_s.map(|h| ms_to_us(h * 1000.0))
    }

    fn execute(&mut self) {
        self.schedule_next_arrival();
        if !matches!(self.forecaster, Forecaster::None) {
            self.push(0, EventKind::PredictionRound);
        }
        self.push(0, EventKind::MetricsTick);
        let horizon = self.horizon_us();
        while let Some(Reverse(ev)) = self.events.pop() {
            if horizon.is_some_and(|h| ev.time > h) {
                self.now = horizon.unwrap_or(ev.time);
                break;
            }
            debug_assert!(ev.time >= self.now, "time went backwards");
            self.now = ev.time;
            match ev.kind {
                EventKind::Arrival(i) => self.on_arrival(i),
                EventKind::LinkTick(g) => self.on_link_tick(g),
                EventKind::TransferDone(a) => self.on_transfer_done(a),
                EventKind::BatchComplete => self.on_batch_complete(),
                EventKind::PredictionRound => self.on_prediction_round(),
                EventKind::MetricsTick => self.on_metrics_tick(),
                EventKind::CompactionDone => {
                    self.phase = Phase::Idle;
                    self.boundary();
                }
                EventKind::Kick => {
                    self.kick_pending = false;
                    if self.phase == Phase::Idle {
                        self.boundary();
                    }
                }
            }
            if self.done() {
                break;
            }
        }
        self.end_us = match horizon {
            Some(h) => h,
            None => self
                .outcomes
                .iter()
                .map(|o| o.completion_us)
                .max()
                .unwrap_or(0),
        };
    }

    fn log(&mut self, action: Action, adapter: Option<AdapterId>, score: f64) {
        let probability = adapter.map_or(0.0, |a| self.residency.get(a).prediction);
        self.log_with(action, adapter, probability, score);
    }

    fn log_with(
        &mut self,
        action: Action,
        adapter: Option<AdapterId>,
        probability: f64,
        score: f64,
    ) {
        if self.cfg.options.verbose {
            self.decisions.push(Decision {
                time_us: self.now,
                action,
                adapter,
                probability,
                score,
            });
        }
    }

    fn kick(&mut self) {
        if self.phase == Phase::Idle && !self.kick_pending {
            self.kick_pending = true;
            self.push(self.now, EventKind::Kick);
        }
    }

    fn is_ready(&self, a: AdapterId) -> bool {
        matches!(
            self.residency.status(a),
            Status::Resident | Status::Staging { complete: true }
        )
    }

    fn on_arrival(&mut self, i: usize) {
        self.schedule_next_arrival();
        let r = self.requests[i];
        self.resident_at_arrival[i] = self.is_ready(r.adapter);
        self.residency
            .record_access(r.adapter, self.now, self.policy.freq_half_life_s);
        if let Forecaster::Lstm(p) = &mut self.forecaster {
            p.observe(r.adapter, self.now);
        }
        self.waiting.push_back(i);
        self.kick();
    }

    fn reschedule_link(&mut self) {
        self.link_gen += 1;
        if let Some(t) = self.link.next_completion() {
            let g = self.link_gen;
            self.push(t.max(self.now), EventKind::LinkTick(g));
        }
    }

    fn on_link_tick(&mut self, generation: u64) {
        if generation != self.link_gen {
            return;
        }
        let tail = self.link.base_latency_us();
        for a in self.link.finish(self.now) {
            self.push(self.now + tail, EventKind::TransferDone(a));
        }
        self.reschedule_link();
    }

    fn on_transfer_done(&mut self, a: AdapterId) {
        self.ready_at[a.index()] = self.now;
        match self.residency.status(a) {
            Status::Loading => self.residency.set_status(a, Status::Resident),
            Status::Staging { complete: false } => self
                .residency
                .set_status(a, Status::Staging { complete: true }),
            s => unreachable!("transfer finished for adapter {a} in state {s:?}"),
        }
        if self.pending_loads.remove(&a)
            && self.pending_loads.is_empty()
            && self.phase == Phase::Loading
        {
            self.start_step();
        } else {
            self.kick();
        }
    }

    fn footprint(&self, a: AdapterId) -> u64 {
        self.memory
            .footprint(self.catalog.get(a).expect("validated adapter"))
    }

    fn evict(&mut self, a: AdapterId, score: f64) {
        assert_eq!(
            self.busy[a.index()],
            0,
            "evicting adapter {a} with requests in flight"
        );
        debug_assert_eq!(self.residency.status(a), Status::Resident);
        self.memory
            .release(a)
            .expect("resident adapter owns memory");
        self.residency.set_status(a, Status::NotResident);
        self.report.activity.evictions += 1;
        self.log(Action::Evict, Some(a), score);
    }

    /// Frees room for `a` and allocates it, evicting only adapters that no
    /// running request uses and that `victims` allows.
    fn make_room(&mut self, a: AdapterId, victims: Victims) -> bool {
        let theta = self.policy.theta;
        let busy = &self.busy;
        let wanted = &self.wanted;
        let order = eviction_order(&self.residency, &self.policy, self.now, |id| {
            busy[id.index()] == 0
                && match victims {
                    Victims::Any => true,
                    Victims::Unqueued => !wanted.contains(&id),
                    Victims::Cold => {
                        self.residency.get(id).prediction <= theta && !wanted.contains(&id)
                    }
                }
        });
        let spec = self.catalog.get(a).expect("validated adapter");
        match self.memory.kind() {
            AllocatorKind::Paged => {
                let need = self.memory.footprint(spec);
                let free = self.memory.free_bytes();
                let victims = match evict_until(need, free, &order, |id| self.footprint(id)) {
                    Ok(v) => v,
                    Err(_) => return false,
                };
                let scores: BTreeMap<AdapterId, f64> = order.iter().copied().collect();
                for v in victims {
                    self.evict(v, scores[&v]);
                }
                self.memory
                    .alloc(spec)
                    .expect("enough pages after eviction");
                true
            }
            AllocatorKind::Block => {
                let mut victims = order.into_iter();
                loop {
                    match self.memory.alloc(spec) {
                        Ok(()) => return true,
                        Err(MemoryError::OutOfMemory { .. } | MemoryError::Fragmented { .. }) => {
                            match victims.next() {
                                Some((v, s)) => self.evict(v, s),
                                None => return false,
                            }
                        }
                        Err(e) => panic!("unexpected allocator error: {e}"),
                    }
                }
            }
        }
    }

    /// Makes `a` available to an admitted request. Returns `Some(cold)` on
    /// success and `None` when memory cannot be freed.
    fn acquire(&mut self, a: AdapterId) -> Option<bool> {
        match self.residency.status(a) {
            Status::Resident => Some(false),
            Status::Staging { complete: true } => {
                self.staged_bytes -= self.footprint(a);
                self.residency.set_status(a, Status::Resident);
                self.report.activity.promotions += 1;
                self.log(Action::Promote, Some(a), 0.0);
                Some(false)
            }
            Status::Loading => Some(true),
            Status::Staging { complete: false } => {
                self.staged_bytes -= self.footprint(a);
                self.residency.set_status(a, Status::Loading);
                if self.link.upgrade(self.now, a) {
                    self.reschedule_link();
                }
                self.report.activity.prefetch_upgrades += 1;
                self.log(Action::Upgrade, Some(a), 0.0);
                self.pending_loads.insert(a);
                Some(true)
            }
            Status::NotResident => {
                if !self.make_room(a, Victims::Any) {
                    return None;
                }
                self.residency.set_status(a, Status::Loading);
                let bytes = self.catalog.get(a).expect("validated adapter").weight_bytes;
                self.link.start(self.now, a, bytes, Priority::Demand);
                self.reschedule_link();
                self.report.activity.demand_loads += 1;
                self.log(Action::DemandLoad, Some(a), 0.0);
                self.pending_loads.insert(a);
                Some(true)
            }
        }
    }

    fn promote(&mut self) {
        let promoted = promote_staged(&mut self.residency);
        for a in promoted {
            self.staged_bytes -= self.footprint(a);
            self.report.activity.promotions += 1;
            self.log(Action::Promote, Some(a), 0.0);
        }
    }

    fn stage(&mut self, a: AdapterId, probability: f64, victims: Victims) -> bool {
        if !self.make_room(a, victims) {
            return false;
        }
        self.residency
            .set_status(a, Status::Staging { complete: false });
        self.staged_bytes += self.footprint(a);
        let bytes = self.catalog.get(a).expect("validated adapter").weight_bytes;
        self.link.start(self.now, a, bytes, Priority::Prefetch);
        self.report.activity.prefetches += 1;
        // queued adapters are staged with certainty, whatever the forecast says
        self.log_with(Action::Prefetch, Some(a), probability, probability);
        true
    }

    fn prefetch(&mut self) {
        if !self.cfg.policy.prefetch_enabled() {
            return;
        }
        self.wanted.clear();
        if self.cfg.policy.prefetch_queued {
            // requests left waiting this boundary are admitted at the next ones
            let lookahead = self.cfg.cost.batch_slots;
            let queued: Vec<AdapterId> = self
                .waiting
                .iter()
                .take(lookahead)
                .map(|&i| self.requests[i].adapter)
                .collect();
            self.wanted.extend(queued.iter().copied());
            for a in queued {
                if self.residency.status(a) != Status::NotResident {
                    continue;
                }
                if self.staged_bytes + self.footprint(a) > self.policy.staging_capacity_bytes
                    || !self.stage(a, 1.0, Victims::Unqueued)
                {
                    break;
                }
            }
        }
        if !self.latest.is_empty() {
            let picks = select_prefetch(
                &self.latest,
                &self.residency,
                &self.policy,
                self.staged_bytes,
                |a| self.footprint(a),
            );
            for a in picks {
                let p = self.residency.get(a).prediction;
                if !self.stage(a, p, Victims::Cold) {
                    break;
                }
            }
        }
        self.reschedule_link();
    }

    /// Between batches: promote, admit, prefetch, then start the next step
    /// or go idle.
    fn boundary(&mut self) {
        debug_assert!(matches!(self.phase, Phase::Idle | Phase::Running));
        self.promote();
        let slots = self.cfg.cost.batch_slots;
        let mut kept = VecDeque::with_capacity(self.waiting.len());
        while let Some(i) = self.waiting.pop_front() {
            if self.running.len() + self.admitted.len() >= slots {
                kept.push_back(i);
                kept.extend(self.waiting.drain(..));
                break;
            }
            let a = self.requests[i].adapter;
            // mark busy first so the adapter cannot be chosen as a victim
            self.busy[a.index()] += 1;
            match self.acquire(a) {
                Some(cold) => self.admitted.push(Admitted {
                    req: i,
                    admit_us: self.now,
                    cold,
                }),
                None => {
                    self.busy[a.index()] -= 1;
                    self.report.activity.admission_failures += 1;
                    kept.push_back(i);
                }
            }
        }
        self.waiting = kept;
        self.prefetch();

        if self.running.is_empty() && self.admitted.is_empty() {
            self.phase = Phase::Idle;
            self.maybe_compact();
        } else if self.pending_loads.is_empty() {
            self.start_step();
        } else {
            self.phase = Phase::Loading;
        }
    }

    fn maybe_compact(&mut self) {
        if !self.waiting.is_empty() {
            return;
        }
        let threshold = self.cfg.allocator.compaction_threshold;
        let per_page = self.cfg.cost.compaction_ms_per_page;
        if let AdapterMemory::Paged(pool) = &mut self.memory {
            if pool.scatter() > threshold {
                let moved = pool.compact();
                if moved > 0 {
                    self.report.memory.compactions += 1;
                    self.report.memory.pages_relocated += u64::from(moved);
                    self.phase = Phase::Compacting;
                    self.log(Action::Compact, None, f64::from(moved));
                    let t = self.now + ms_to_us(per_page * f64::from(moved));
                    self.push(t, EventKind::CompactionDone);
                }
            }
        }
    }

    fn start_step(&mut self) {
        self.phase = Phase::Running;
        let mut t = self.now;
        if self.memory.kind() == AllocatorKind::Paged {
            let pt = ms_to_us(self.cfg.cost.page_table_overhead_ms);
            self.page_table_us += pt;
            t += pt;
        }
        self.report.overhead.batches += 1;
        let decoding = self.running.len();
        for adm in std::mem::take(&mut self.admitted) {
            let r = self.requests[adm.req];
            let prefill = self.cfg.cost.prefill_us(r.input_tokens);
            let cold_us = if adm.cold {
                self.ready_at[r.adapter.index()] - adm.admit_us
            } else {
                0
            };
            let start = t;
            t += prefill;
            let queue_us = start - r.arrival_us - cold_us;
            self.running.push(Running {
                req: adm.req,
                first_token_us: t,
                remaining: r.output_tokens.saturating_sub(1),
                outcome_partial: Partial {
                    cold: adm.cold,
                    cold_us,
                    queue_us,
                    prefill_us: prefill,
                },
            });
        }
        if decoding > 0 {
            t += self.cfg.cost.decode_step_us(decoding);
        }
        // the decoding requests are the first `decoding` entries
        self.step_decoding = decoding;
        self.push(t, EventKind::BatchComplete);
    }

    fn on_batch_complete(&mut self) {
        let decoding = self.step_decoding;
        for r in &mut self.running[..decoding] {
            r.remaining -= 1;
        }
        let now = self.now;
        let mut still = Vec::with_capacity(self.running.len());
        for r in std::mem::take(&mut self.running) {
            if r.remaining == 0 {
                self.complete(r, now);
            } else {
                still.push(r);
            }
        }
        self.running = still;
        self.boundary();
    }

    fn complete(&mut self, r: Running, now: Micros) {
        let req = self.requests[r.req];
        self.busy[req.adapter.index()] -= 1;
        let p = r.outcome_partial;
        let ttft = r.first_token_us - req.arrival_us;
        debug_assert_eq!(ttft, p.queue_us + p.cold_us + p.prefill_us);
        let tpot_ms = if req.output_tokens > 1 {
            us_to_ms(now - r.first_token_us) / f64::from(req.output_tokens - 1)
        } else {
            0.0
        };
        self.outcomes.push(RequestOutcome {
            request: req,
            cold_start: p.cold,
            cold_start_us: p.cold_us,
            queue_us: p.queue_us,
            prefill_us: p.prefill_us,
            ttft_us: ttft,
            tpot_ms,
            completion_us: now,
            resident_at_arrival: self.resident_at_arrival[r.req],
        });
    }

    fn on_prediction_round(&mut self) {
        let now = self.now;
        let preds = match &mut self.forecaster {
            Forecaster::None => return,
            Forecaster::Lstm(p) => p.predict_all(now),
            Forecaster::Oracle(o) => o.predict_all(now),
        };
        self.pred_us += ms_to_us(self.cfg.cost.predictor_overhead_ms);
        if self.cfg.policy.prefetch_enabled() {
            self.prefetch_us += ms_to_us(self.cfg.cost.prefetch_sched_overhead_ms);
        }
        self.report.overhead.prediction_rounds += 1;
        let interval = now / self.interval_us;
        if self.last_forecast_interval != Some(interval) {
            self.last_forecast_interval = Some(interval);
            self.forecasts.push(IntervalForecast {
                interval,
                probabilities: preds
                    .iter()
                    .map(|p| (p.adapter_id, p.probability))
                    .collect(),
            });
        }
        self.residency.set_predictions(&preds);
        self.latest = preds;
        self.kick();
        if !self.done() {
            let k = self.report.overhead.prediction_rounds;
            let t = ms_to_us(self.cfg.cost.prediction_cadence_ms * k as f64);
            self.push(t.max(self.now), EventKind::PredictionRound);
        }
    }

    fn on_metrics_tick(&mut self) {
        let f = self.memory.report();
        self.timeseries.push(TimeseriesRow {
            time_ms: us_to_ms(self.now),
            utilization: f.utilization,
            external_frag: f.external_frag,
            internal_frag: f.internal_frag,
            resident_adapters: self.residency.count(|s| s == Status::Resident) as u32,
            pending: self.waiting.len() as u32,
        });
        if !self.done() {
            let k = self.timeseries.len() as f64;
            let t = ms_to_us(self.cfg.options.metrics_tick_ms * k);
            self.push(t.max(self.now), EventKind::MetricsTick);
        }
    }

    fn finish(mut self) -> RunResult {
        let warmup_us = ms_to_us(self.cfg.options.warmup_s * 1000.0);
        let mut r = std::mem::take(&mut self.report);
        r.completed = self.outcomes.len() as u64;
        r.duration_s = self.end_us as f64 / US_PER_S as f64;
        r.throughput_rps = if self.end_us == 0 {
            0.0
        } else {
            r.completed as f64 / r.duration_s
        };
        self.outcomes.sort_by_key(|o| o.request.id);
        metrics::summarize_requests(&mut r, &self.outcomes, warmup_us);

        let arrived: Vec<usize> = (0..self.next_arrival)
            .filter(|&i| self.requests[i].arrival_us >= warmup_us)
            .collect();
        let hits = arrived
            .iter()
            .filter(|&&i| self.resident_at_arrival[i])
            .count() as u64;
        r.resident_hit_rate = if arrived.is_empty() {
            0.0
        } else {
            hits as f64 / arrived.len() as f64
        };

        if !matches!(self.forecaster, Forecaster::None) {
            let mut actual: BTreeMap<u64, BTreeSet<AdapterId>> = BTreeMap::new();
            for req in &self.requests[..self.next_arrival] {
                actual
                    .entry(req.arrival_us / self.interval_us)
                    .or_default()
                    .insert(req.adapter);
            }
            // only intervals that ended inside the run are scored
            let last_full = self.end_us / self.interval_us;
            self.forecasts.retain(|f| f.interval < last_full);
            r.accuracy = Some(evaluate_accuracy(
                &self.forecasts,
                &actual,
                self.policy.theta,
                warmup_us.div_ceil(self.interval_us),
                (hits, arrived.len() as u64),
            ));
        }
        if let Forecaster::Lstm(p) = &self.forecaster {
            r.activity.train_steps = p.train_steps();
            r.activity.final_train_loss = p.last_loss();
        }

        let samples: Vec<&TimeseriesRow> = {
            let late: Vec<&TimeseriesRow> = self
                .timeseries
                .iter()
                .filter(|t| ms_to_us(t.time_ms) >= warmup_us)
                .collect();
            if late.is_empty() {
                self.timeseries.iter().collect()
            } else {
                late
            }
        };
        let mean = |f: fn(&TimeseriesRow) -> f64| {
            if samples.is_empty() {
                0.0
            } else {
                samples.iter().map(|t| f(t)).sum::<f64>() / samples.len() as f64
            }
        };
        r.memory.utilization_mean = mean(|t| t.utilization);
        r.memory.external_frag_mean = mean(|t| t.external_frag);
        r.memory.internal_frag_mean = mean(|t| t.internal_frag);
        if let AdapterMemory::Block(b) = &self.memory {
            r.memory.fragmentation_failures = b.fragmentation_failures();
        }

        let o = &mut r.overhead;
        o.predictor_us = self.pred_us;
        o.prefetch_scheduler_us = self.prefetch_us;
        o.page_table_us = self.page_table_us;
        o.predictor_ms = us_to_ms(self.pred_us);
        o.prefetch_scheduler_ms = us_to_ms(self.prefetch_us);
        o.page_table_ms = us_to_ms(self.page_table_us);
        o.total_ms = us_to_ms(self.pred_us + self.prefetch_us + self.page_table_us);
        let per = |total: Micros, n: u64| total.checked_div(n).unwrap_or(0);
        o.per_round_us = per(self.pred_us, o.prediction_rounds)
            + per(self.prefetch_us, o.prediction_rounds)
            + per(self.page_table_us, o.batches);
        o.per_round_ms = us_to_ms(o.per_round_us);

        RunResult {
            metrics: r,
            outcomes: self.outcomes,
            timeseries: self.timeseries,
            decisions: self.decisions,
        }
    }
}
