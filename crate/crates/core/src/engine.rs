//! Fixed-step simulation of a controller, its invokers and their energy supply.
//!
//! Each tick runs, in order: container completions, restarts of recovered servers,
//! energy-profile publication and delivery, retry-queue resubmission, new arrivals,
//! power and emissions accounting, and (grid-isolated) battery integration with
//! shutdowns. A run is single-threaded and a pure function of its config, workload
//! and seed.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancer::{Balancer, BalancerPolicy, ClusterView, Outcome, RetryQueue};
use crate::energy::{
    battery_step, power_draw, scaled_emissions, BatteryStep, EnergyProfileMsg, EnergyState,
    ProfileChannel, SECONDS_PER_HOUR,
};
use crate::model::{validate_server, InvocationRequest, Mode, ModelError, ServerState, SimTick};
use crate::traces::{CarbonTrace, LocationSpec, SolarTrace, Workload};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Server(#[from] ModelError),
    #[error("function trace covers {have} minutes but the run needs {need}")]
    FunctionTraceTooShort { have: usize, need: usize },
    #[error("no {kind} trace for location {location}")]
    MissingTrace { kind: &'static str, location: String },
    #[error("trace for location {location} has no samples")]
    EmptyTrace { location: String },
}

/// Energy supply of one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationBinding {
    pub location_id: String,
    pub battery_wh: f64,
    /// Initial state of charge, fraction of capacity.
    pub initial_soc: f64,
    pub max_discharge_w: f64,
    pub buffer_fraction: f64,
    pub discharge_horizon_s: f64,
    pub solar_array_w: f64,
}

impl LocationBinding {
    pub const DEFAULT_MAX_DISCHARGE_W: f64 = 1900.0;

    pub fn from_spec(spec: &LocationSpec) -> Self {
        LocationBinding {
            location_id: spec.location_id.clone(),
            battery_wh: spec.battery_wh,
            initial_soc: 1.0,
            max_discharge_w: Self::DEFAULT_MAX_DISCHARGE_W,
            buffer_fraction: EnergyState::DEFAULT_BUFFER_FRACTION,
            discharge_horizon_s: EnergyState::DEFAULT_DISCHARGE_HORIZON_S,
            solar_array_w: spec.solar_array_w,
        }
    }

    fn initial_state(&self) -> EnergyState {
        EnergyState {
            location_id: self.location_id.clone(),
            battery_level: self.initial_soc * self.battery_wh,
            battery_capacity: self.battery_wh,
            max_discharge_rate: self.max_discharge_w,
            buffer_fraction: self.buffer_fraction,
            solar_output: 0.0,
            discharge_horizon_s: self.discharge_horizon_s,
        }
    }
}

/// Power constants shared by generated servers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerParams {
    pub p_idle: f64,
    pub p_peak: f64,
}

impl Default for ServerParams {
    fn default() -> Self {
        // Two servers at peak for ten hours fill a 3.8 kWh battery.
        ServerParams {
            p_idle: 60.0,
            p_peak: 190.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mode: Mode,
    pub policy: BalancerPolicy,
    pub seed: u64,
    pub duration_s: u64,
    pub tick_s: u64,
    pub servers: Vec<ServerState>,
    pub locations: Vec<LocationBinding>,
    pub num_function_types: u32,
    pub containers_per_server: usize,
    /// Memory units one invocation occupies.
    pub mem_per_function: u32,
    pub cold_start_penalty_s: f64,
    pub warm_start_penalty_s: f64,
    pub profile_delay_s: u64,
    pub profile_period_s: u64,
    pub max_retries: u32,
    pub retry_interval_s: u64,
    /// Battery fraction below which a location is in a critical state.
    pub critical_fraction: f64,
    /// Battery fraction a shut-down location must regain before restarting.
    pub restart_fraction: f64,
    pub retry_on_high_carbon: Option<f64>,
}

impl SimConfig {
    pub const DEFAULT_CONTAINERS: usize = 3;

    /// Builds `spec.servers` servers per location, named `<location>-<n>`.
    pub fn from_locations(
        mode: Mode,
        policy: BalancerPolicy,
        seed: u64,
        duration_s: u64,
        locations: &[LocationSpec],
        params: ServerParams,
    ) -> Self {
        let servers = locations
            .iter()
            .flat_map(|l| {
                (0..l.servers).map(move |n| {
                    ServerState::new(
                        format!("{}-{n}", l.location_id),
                        l.location_id.clone(),
                        Self::DEFAULT_CONTAINERS,
                        params.p_idle,
                        params.p_peak,
                    )
                })
            })
            .collect();
        SimConfig {
            mode,
            policy,
            seed,
            duration_s,
            tick_s: 1,
            servers,
            locations: locations.iter().map(LocationBinding::from_spec).collect(),
            num_function_types: crate::traces::DEFAULT_NUM_FUNCTION_TYPES,
            containers_per_server: Self::DEFAULT_CONTAINERS,
            mem_per_function: 1,
            cold_start_penalty_s: 0.5,
            warm_start_penalty_s: 0.005,
            profile_delay_s: 0,
            profile_period_s: 1,
            max_retries: RetryQueue::DEFAULT_MAX_RETRIES,
            retry_interval_s: RetryQueue::DEFAULT_RETRY_INTERVAL,
            critical_fraction: 0.20,
            restart_fraction: 0.05,
            retry_on_high_carbon: None,
        }
    }

    /// Gives every server `containers` empty slots and memory for that many invocations.
    pub fn set_containers_per_server(&mut self, containers: usize) {
        self.containers_per_server = containers;
        for s in &mut self.servers {
            s.containers = vec![Default::default(); containers];
            s.mem_limit = containers as u32 * self.mem_per_function;
            s.mem_used = 0;
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.tick_s == 0 {
            return bad("tick must be positive".into());
        }
        if !self.duration_s.is_multiple_of(self.tick_s) {
            return bad(format!(
                "duration {} s is not a multiple of the {} s tick",
                self.duration_s, self.tick_s
            ));
        }
        if self.servers.is_empty() {
            return bad("no servers".into());
        }
        if self.profile_period_s == 0 {
            return bad("profile period must be positive".into());
        }
        if self.mem_per_function == 0 {
            return bad("memory per function must be positive".into());
        }
        if self.cold_start_penalty_s < 0.0 || self.warm_start_penalty_s < 0.0 {
            return bad("start penalties must be non-negative".into());
        }
        let mut ids = std::collections::HashSet::new();
        for s in &self.servers {
            validate_server(s)?;
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate server id {}", s.id));
            }
            if s.containers.is_empty() {
                return bad(format!("server {} has no containers", s.id));
            }
            if !self.locations.iter().any(|l| l.location_id == s.location_id) {
                return bad(format!("server {} references unknown location {}", s.id, s.location_id));
            }
        }
        for l in &self.locations {
            let e = l.initial_state();
            if !(0.0..=1.0).contains(&l.initial_soc) {
                return bad(format!("{}: initial state of charge {} outside [0,1]", l.location_id, l.initial_soc));
            }
            e.validate().map_err(|err| SimError::Config(err.to_string()))?;
            if !(l.solar_array_w >= 0.0) {
                return bad(format!("{}: negative solar array", l.location_id));
            }
        }
        Ok(())
    }
}

/// Whether a placement reused a warm container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartKind {
    Cold,
    Warm,
}

impl StartKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StartKind::Cold => "cold",
            StartKind::Warm => "warm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    WarmStart(usize),
    ColdStart(usize),
    NoCapacity,
}

/// Picks a container on `server` for a function of `func_type` starting at `now`.
///
/// A free container already holding the type is a warm start. Otherwise a free
/// container is re-typed (unused containers first) and the start is cold. The
/// container is only marked busy by the caller.
pub fn place_in_container(server: &mut ServerState, func_type: u32, now: f64) -> Placement {
    let free = |c: &crate::model::ContainerSlot| c.is_free_at(now);
    if let Some(i) = server
        .containers
        .iter()
        .position(|c| free(c) && c.current_type == Some(func_type))
    {
        return Placement::WarmStart(i);
    }
    let slot = server
        .containers
        .iter()
        .position(|c| free(c) && c.current_type.is_none())
        .or_else(|| server.containers.iter().position(free));
    match slot {
        Some(i) => {
            server.containers[i].current_type = Some(func_type);
            Placement::ColdStart(i)
        }
        None => Placement::NoCapacity,
    }
}

/// Spreads one minute's invocations evenly: arrival `k` lands at second
/// `floor(k * 60 / count)` of the minute.
pub fn spread_arrivals(count: u32, minute_index: u64) -> Vec<SimTick> {
    let start = minute_index * 60;
    (0..u64::from(count))
        .map(|k| SimTick(start + k * 60 / u64::from(count)))
        .collect()
}

/// Modeled end-to-end latency of an executed invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutionOutcome {
    pub arrival: SimTick,
    pub start: SimTick,
    pub start_kind: StartKind,
    pub exec_time_s: f64,
}

/// Retry waiting time, start penalty and execution time.
pub fn latency_of(o: &ExecutionOutcome, cold_penalty_s: f64, warm_penalty_s: f64) -> f64 {
    let queueing = (o.start.0 - o.arrival.0) as f64;
    let penalty = match o.start_kind {
        StartKind::Cold => cold_penalty_s,
        StartKind::Warm => warm_penalty_s,
    };
    queueing + penalty + o.exec_time_s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// An executed invocation, recorded at completion (or at cutoff if still running).
    Invocation,
    /// Killed by a shutdown of its server.
    Interrupted,
    /// Retry budget exhausted.
    Failed,
    Shutdown,
    Restart,
    /// Idle energy of one server over one hour.
    Idle,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Invocation => "invocation",
            EventKind::Interrupted => "interrupted",
            EventKind::Failed => "failed",
            EventKind::Shutdown => "shutdown",
            EventKind::Restart => "restart",
            EventKind::Idle => "idle",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "invocation" => EventKind::Invocation,
            "interrupted" => EventKind::Interrupted,
            "failed" => EventKind::Failed,
            "shutdown" => EventKind::Shutdown,
            "restart" => EventKind::Restart,
            "idle" => EventKind::Idle,
            other => return Err(format!("unknown event kind {other:?}")),
        })
    }
}

/// One row of the event log. The energy and emissions of all rows sum to the run
/// totals: invocation rows carry their dynamic share, idle rows the idle share.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub time: SimTick,
    pub server_id: Option<Arc<str>>,
    pub location_id: Option<Arc<str>>,
    pub function_id: Option<Arc<str>>,
    pub invocation: Option<u64>,
    pub arrival: Option<SimTick>,
    pub start: Option<SimTick>,
    pub start_kind: Option<StartKind>,
    pub retries: u32,
    pub latency_s: Option<f64>,
    pub energy_wh: f64,
    pub emissions_lbs: f64,
}

pub const EVENT_HEADER: [&str; 13] = [
    "kind",
    "time_s",
    "server_id",
    "location_id",
    "function_id",
    "invocation",
    "arrival_s",
    "start_s",
    "start_kind",
    "retries",
    "latency_s",
    "energy_wh",
    "emissions_lbs",
];

impl Event {
    fn bare(kind: EventKind, time: SimTick) -> Self {
        Event {
            kind,
            time,
            server_id: None,
            location_id: None,
            function_id: None,
            invocation: None,
            arrival: None,
            start: None,
            start_kind: None,
            retries: 0,
            latency_s: None,
            energy_wh: 0.0,
            emissions_lbs: 0.0,
        }
    }

    /// Fields in [`EVENT_HEADER`] order.
    pub fn record(&self) -> [String; 13] {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        [
            self.kind.to_string(),
            self.time.to_string(),
            opt(&self.server_id),
            opt(&self.location_id),
            opt(&self.function_id),
            opt(&self.invocation),
            opt(&self.arrival),
            opt(&self.start),
            self.start_kind.map(|k| k.as_str().to_string()).unwrap_or_default(),
            self.retries.to_string(),
            opt(&self.latency_s),
            self.energy_wh.to_string(),
            self.emissions_lbs.to_string(),
        ]
    }
}

/// Inputs and result of one battery integration step.
#[derive(Debug, Clone, Copy)]
pub struct BatteryRecord<'a> {
    pub time: SimTick,
    pub before: &'a EnergyState,
    pub solar_w: f64,
    pub load_w: f64,
    pub dt_s: f64,
    pub step: &'a BatteryStep,
}

/// Hooks into a run. All methods default to no-ops.
pub trait SimObserver {
    fn on_event(&mut self, _event: &Event) {}
    fn on_battery_step(&mut self, _record: &BatteryRecord<'_>) {}
}

pub struct NullObserver;

impl SimObserver for NullObserver {}

/// Collects every event in memory.
#[derive(Debug, Default)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl SimObserver for EventLog {
    fn on_event(&mut self, event: &Event) {
        self.events.push(event.clone());
    }
}

/// Streams events as CSV. The first write error is kept and later events dropped.
pub struct CsvEventWriter<W: Write> {
    writer: csv::Writer<W>,
    error: Option<csv::Error>,
}

impl<W: Write> CsvEventWriter<W> {
    pub fn new(inner: W) -> Result<Self, csv::Error> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(EVENT_HEADER)?;
        Ok(CsvEventWriter { writer, error: None })
    }

    pub fn finish(mut self) -> Result<(), csv::Error> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.writer.flush()?;
        Ok(())
    }
}

impl<W: Write> SimObserver for CsvEventWriter<W> {
    fn on_event(&mut self, event: &Event) {
        if self.error.is_none() {
            if let Err(e) = self.writer.write_record(event.record()) {
                self.error = Some(e);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub max_s: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let rank = |p: f64| samples[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            count: n as u64,
            mean_s: samples.iter().sum::<f64>() / n as f64,
            p50_s: rank(0.50),
            p95_s: rank(0.95),
            p99_s: rank(0.99),
            max_s: samples[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: BalancerPolicy,
    pub mode: Mode,
    pub seed: u64,
    pub duration_s: u64,
    pub num_servers: usize,
    pub arrivals: u64,
    /// Invocations placed in a container (cold + warm), including interrupted ones and
    /// ones still running at cutoff.
    pub executed: u64,
    pub failed_invocations: u64,
    pub interrupted: u64,
    pub running_at_cutoff: u64,
    pub still_queued: u64,
    pub cold_starts: u64,
    pub warm_starts: u64,
    pub total_energy_wh: f64,
    pub total_emissions_lbs: f64,
    /// Baseline total minus this run's total; set when compared against a baseline run.
    pub emissions_avoided_vs_baseline_lbs: Option<f64>,
    pub hourly_emissions_lbs: Vec<f64>,
    pub downtime_server_s: u64,
    pub shutdown_count: u64,
    pub restart_count: u64,
    pub critical_battery_events: u64,
    pub latency: LatencyStats,
}

/// Baseline minus policy, per run and per hour.
pub fn emissions_avoided(baseline: &RunMetrics, policy: &RunMetrics) -> f64 {
    baseline.total_emissions_lbs - policy.total_emissions_lbs
}

pub fn hourly_emissions_avoided(baseline: &RunMetrics, policy: &RunMetrics) -> Vec<f64> {
    baseline
        .hourly_emissions_lbs
        .iter()
        .zip(&policy.hourly_emissions_lbs)
        .map(|(b, p)| b - p)
        .collect()
}

#[derive(Debug, Clone)]
struct Running {
    request: InvocationRequest,
    start: SimTick,
    start_s: f64,
    end_s: f64,
    kind: StartKind,
    latency_s: f64,
    energy_wh: f64,
    emissions_lbs: f64,
}

struct Engine<'w, O: SimObserver> {
    cfg: &'w SimConfig,
    observer: &'w mut O,
    servers: Vec<ServerState>,
    server_ids: Vec<Arc<str>>,
    location_ids: Vec<Arc<str>>,
    location_of: Vec<usize>,
    running: Vec<Vec<Option<Running>>>,
    energy: Vec<EnergyState>,
    channels: Vec<ProfileChannel>,
    snapshots: Vec<Option<EnergyProfileMsg>>,
    carbon: Vec<Option<&'w CarbonTrace>>,
    solar: Vec<Option<&'w SolarTrace>>,
    workload: &'w Workload,
    balancer: Balancer,
    rng: ChaCha8Rng,
    next_seq: u64,
    idle_hour: Vec<(f64, f64)>,
    latencies: Vec<f64>,
    m: RunMetrics,
}

/// Runs one simulation without observing events.
pub fn run(config: &SimConfig, workload: &Workload) -> Result<RunMetrics, SimError> {
    run_observed(config, workload, &mut NullObserver)
}

pub fn run_observed<O: SimObserver>(
    config: &SimConfig,
    workload: &Workload,
    observer: &mut O,
) -> Result<RunMetrics, SimError> {
    let mut engine = Engine::new(config, workload, observer)?;
    engine.run();
    Ok(engine.finish())
}

impl<'w, O: SimObserver> Engine<'w, O> {
    fn new(cfg: &'w SimConfig, workload: &'w Workload, observer: &'w mut O) -> Result<Self, SimError> {
        cfg.validate()?;
        let need = cfg.duration_s.div_ceil(60) as usize;
        if workload.functions.minutes() < need {
            return Err(SimError::FunctionTraceTooShort {
                have: workload.functions.minutes(),
                need,
            });
        }
        for f in &workload.functions.functions {
            f.validate(cfg.num_function_types)?;
        }
        let location_ids: Vec<Arc<str>> = cfg.locations.iter().map(|l| Arc::from(l.location_id.as_str())).collect();
        let location_of = cfg
            .servers
            .iter()
            .map(|s| {
                cfg.locations
                    .iter()
                    .position(|l| l.location_id == s.location_id)
                    .expect("validated")
            })
            .collect();
        let mut carbon = Vec::new();
        let mut solar = Vec::new();
        for l in &cfg.locations {
            let c = workload.carbon.iter().find(|c| c.location_id == l.location_id);
            let s = workload.solar.iter().find(|s| s.location_id == l.location_id);
            match cfg.mode {
                Mode::GridConnected => {
                    let c = c.ok_or_else(|| SimError::MissingTrace {
                        kind: "carbon",
                        location: l.location_id.clone(),
                    })?;
                    if c.samples.is_empty() {
                        return Err(SimError::EmptyTrace {
                            location: l.location_id.clone(),
                        });
                    }
                }
                Mode::GridIsolated => {
                    if s.is_none() {
                        return Err(SimError::MissingTrace {
                            kind: "solar",
                            location: l.location_id.clone(),
                        });
                    }
                }
            }
            carbon.push(c);
            solar.push(s);
        }
        let mut servers = cfg.servers.clone();
        for s in &mut servers {
            s.online = true;
            s.mem_used = 0;
            for c in &mut s.containers {
                *c = Default::default();
            }
        }
        let mut balancer = Balancer::new(cfg.policy, RetryQueue::new(cfg.retry_interval_s, cfg.max_retries));
        balancer.retry_on_high_carbon = cfg.retry_on_high_carbon;
        let hours = cfg.duration_s.div_ceil(3600) as usize;
        Ok(Engine {
            cfg,
            observer,
            server_ids: servers.iter().map(|s| Arc::from(s.id.as_str())).collect(),
            running: servers.iter().map(|s| vec![None; s.containers.len()]).collect(),
            idle_hour: vec![(0.0, 0.0); servers.len()],
            servers,
            location_ids,
            location_of,
            energy: cfg.locations.iter().map(LocationBinding::initial_state).collect(),
            channels: vec![ProfileChannel::new(); cfg.locations.len()],
            snapshots: vec![None; cfg.locations.len()],
            carbon,
            solar,
            workload,
            balancer,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            next_seq: 0,
            latencies: Vec::new(),
            m: RunMetrics {
                policy: cfg.policy,
                mode: cfg.mode,
                seed: cfg.seed,
                duration_s: cfg.duration_s,
                num_servers: cfg.servers.len(),
                arrivals: 0,
                executed: 0,
                failed_invocations: 0,
                interrupted: 0,
                running_at_cutoff: 0,
                still_queued: 0,
                cold_starts: 0,
                warm_starts: 0,
                total_energy_wh: 0.0,
                total_emissions_lbs: 0.0,
                emissions_avoided_vs_baseline_lbs: None,
                hourly_emissions_lbs: vec![0.0; hours],
                downtime_server_s: 0,
                shutdown_count: 0,
                restart_count: 0,
                critical_battery_events: 0,
                latency: LatencyStats::default(),
            },
        })
    }

    fn run(&mut self) {
        let tick = self.cfg.tick_s;
        let mut minute_buckets: Vec<Vec<usize>> = vec![Vec::new(); 60];
        let mut loaded_minute = None;
        let mut t = 0;
        while t < self.cfg.duration_s {
            let now = SimTick(t);
            self.complete(now);
            self.restart_recovered(now);
            self.publish_and_deliver(now);
            for request in self.balancer.queue.drain_due(now) {
                self.submit(request, now);
            }
            for second in t..t + tick {
                let minute = second / 60;
                if loaded_minute != Some(minute) {
                    self.load_minute(minute, &mut minute_buckets);
                    loaded_minute = Some(minute);
                }
                let arrivals = std::mem::take(&mut minute_buckets[(second % 60) as usize]);
                for f in arrivals {
                    let function = self.workload.functions.functions[f].clone();
                    let request = InvocationRequest::new(self.next_seq, function, now);
                    self.next_seq += 1;
                    self.m.arrivals += 1;
                    self.submit(request, now);
                }
            }
            self.account_power(now);
            if self.cfg.mode == Mode::GridIsolated {
                self.step_batteries(now);
            }
            let end = t + tick;
            if end.is_multiple_of(3600) || end == self.cfg.duration_s {
                self.flush_idle(SimTick((t / 3600) * 3600));
            }
            t = end;
        }
    }

    fn load_minute(&self, minute: u64, buckets: &mut [Vec<usize>]) {
        for b in buckets.iter_mut() {
            b.clear();
        }
        let counts = self.workload.functions.counts_at(minute as usize);
        for (f, &c) in counts.iter().enumerate() {
            for at in spread_arrivals(c, minute) {
                buckets[(at.0 % 60) as usize].push(f);
            }
        }
    }

    fn complete(&mut self, now: SimTick) {
        let t = now.as_f64();
        for i in 0..self.servers.len() {
            for c in 0..self.running[i].len() {
                let done = matches!(&self.running[i][c], Some(r) if r.end_s <= t);
                if done {
                    let r = self.running[i][c].take().expect("checked");
                    self.servers[i].mem_used -= self.cfg.mem_per_function;
                    self.emit_invocation(EventKind::Invocation, now, i, r);
                }
            }
        }
    }

    fn emit_invocation(&mut self, kind: EventKind, time: SimTick, server: usize, r: Running) {
        let mut e = Event::bare(kind, time);
        e.server_id = Some(self.server_ids[server].clone());
        e.location_id = Some(self.location_ids[self.location_of[server]].clone());
        e.function_id = Some(r.request.function.id.clone());
        e.invocation = Some(r.request.seq);
        e.arrival = Some(r.request.arrival);
        e.start = Some(r.start);
        e.start_kind = Some(r.kind);
        e.retries = r.request.retry_count;
        e.latency_s = Some(r.latency_s);
        e.energy_wh = r.energy_wh;
        e.emissions_lbs = r.emissions_lbs;
        self.observer.on_event(&e);
    }

    fn restart_recovered(&mut self, now: SimTick) {
        if self.cfg.mode != Mode::GridIsolated {
            return;
        }
        for i in 0..self.servers.len() {
            if self.servers[i].online {
                continue;
            }
            let e = &self.energy[self.location_of[i]];
            if e.battery_level >= self.cfg.restart_fraction * e.battery_capacity {
                self.servers[i].online = true;
                self.m.restart_count += 1;
                let mut ev = Event::bare(EventKind::Restart, now);
                ev.server_id = Some(self.server_ids[i].clone());
                ev.location_id = Some(self.location_ids[self.location_of[i]].clone());
                self.observer.on_event(&ev);
            }
        }
    }

    fn publish_and_deliver(&mut self, now: SimTick) {
        if now.0.is_multiple_of(self.cfg.profile_period_s) {
            for loc in 0..self.cfg.locations.len() {
                let msg = match self.cfg.mode {
                    Mode::GridConnected => EnergyProfileMsg {
                        location_id: self.cfg.locations[loc].location_id.clone(),
                        timestamp: now,
                        carbon_intensity: self.carbon[loc].and_then(|c| c.value_at(now.0)),
                        energy: None,
                    },
                    Mode::GridIsolated => {
                        let mut e = self.energy[loc].clone();
                        e.solar_output = self.solar_output(loc, now);
                        EnergyProfileMsg {
                            location_id: e.location_id.clone(),
                            timestamp: now,
                            carbon_intensity: None,
                            energy: Some(e),
                        }
                    }
                };
                self.channels[loc].publish(msg, self.cfg.profile_delay_s);
            }
        }
        for (ch, snap) in self.channels.iter_mut().zip(&mut self.snapshots) {
            let fresh = ch.deliver(now);
            let changed = match (fresh, snap.as_ref()) {
                (Some(m), Some(s)) => m.timestamp != s.timestamp,
                (Some(_), None) => true,
                _ => false,
            };
            if changed {
                *snap = fresh.cloned();
            }
        }
    }

    fn solar_output(&self, loc: usize, now: SimTick) -> f64 {
        let array = self.cfg.locations[loc].solar_array_w;
        self.solar[loc]
            .and_then(|s| s.gti_at(now.0))
            .map_or(0.0, |g| g / 1000.0 * array)
    }

    fn moer(&self, loc: usize, now: SimTick) -> f64 {
        match self.cfg.mode {
            Mode::GridConnected => self.carbon[loc].and_then(|c| c.value_at(now.0)).unwrap_or(0.0),
            Mode::GridIsolated => 0.0,
        }
    }

    fn submit(&mut self, request: InvocationRequest, now: SimTick) {
        let view = ClusterView {
            mode: self.cfg.mode,
            servers: &self.servers,
            location_of: &self.location_of,
            snapshots: &self.snapshots,
            mem_cost: self.cfg.mem_per_function,
        };
        match self.balancer.submit(request, &view, now, &mut self.rng) {
            Outcome::Assigned(i, request) => self.start(i, request, now),
            Outcome::Enqueued => {}
            Outcome::Failed(request) => self.fail(request, now),
        }
    }

    fn fail(&mut self, request: InvocationRequest, now: SimTick) {
        self.m.failed_invocations += 1;
        let mut e = Event::bare(EventKind::Failed, now);
        e.function_id = Some(request.function.id.clone());
        e.invocation = Some(request.seq);
        e.arrival = Some(request.arrival);
        e.retries = request.retry_count;
        self.observer.on_event(&e);
    }

    fn start(&mut self, i: usize, request: InvocationRequest, now: SimTick) {
        let t = now.as_f64();
        let (slot, kind) = match place_in_container(&mut self.servers[i], request.function.func_type, t) {
            Placement::WarmStart(c) => (c, StartKind::Warm),
            Placement::ColdStart(c) => (c, StartKind::Cold),
            Placement::NoCapacity => {
                // Memory counter allowed it but every container is busy.
                if let Err(request) = self.balancer.queue.enqueue(request, now) {
                    self.fail(request, now);
                }
                return;
            }
        };
        let outcome = ExecutionOutcome {
            arrival: request.arrival,
            start: now,
            start_kind: kind,
            exec_time_s: request.function.mean_exec_time,
        };
        let latency_s = latency_of(&outcome, self.cfg.cold_start_penalty_s, self.cfg.warm_start_penalty_s);
        let penalty = match kind {
            StartKind::Cold => self.cfg.cold_start_penalty_s,
            StartKind::Warm => self.cfg.warm_start_penalty_s,
        };
        let end_s = t + penalty + request.function.mean_exec_time;
        let server = &mut self.servers[i];
        server.mem_used += self.cfg.mem_per_function;
        server.containers[slot].busy_until = Some(end_s);
        match kind {
            StartKind::Cold => self.m.cold_starts += 1,
            StartKind::Warm => self.m.warm_starts += 1,
        }
        self.m.executed += 1;
        self.latencies.push(latency_s);
        self.running[i][slot] = Some(Running {
            request,
            start: now,
            start_s: t,
            end_s,
            kind,
            latency_s,
            energy_wh: 0.0,
            emissions_lbs: 0.0,
        });
    }

    /// Energy over `[now, now + tick)`: the linear power model on each server, charged
    /// at the location's current MOER.
    fn account_power(&mut self, now: SimTick) {
        let t0 = now.as_f64();
        let dt = self.cfg.tick_s as f64;
        let t1 = t0 + dt;
        let hour = (now.0 / 3600) as usize;
        for i in 0..self.servers.len() {
            if !self.servers[i].online {
                self.m.downtime_server_s += self.cfg.tick_s;
                continue;
            }
            let loc = self.location_of[i];
            let moer = self.moer(loc, now);
            let n = self.servers[i].containers.len() as f64;
            let per_container_w = (self.servers[i].p_peak - self.servers[i].p_idle) / n;
            let mut busy = 0.0;
            for r in self.running[i].iter_mut().flatten() {
                let overlap = (r.end_s.min(t1) - r.start_s.max(t0)).max(0.0);
                busy += overlap;
                let wh = per_container_w * overlap / SECONDS_PER_HOUR;
                r.energy_wh += wh;
                r.emissions_lbs += scaled_emissions(wh, moer);
            }
            let load = (busy / (n * dt)).clamp(0.0, 1.0);
            let watts = power_draw(&self.servers[i], load).expect("load clamped to [0,1]");
            let wh = watts * dt / SECONDS_PER_HOUR;
            let lbs = scaled_emissions(wh, moer);
            self.m.total_energy_wh += wh;
            self.m.total_emissions_lbs += lbs;
            self.m.hourly_emissions_lbs[hour] += lbs;
            let idle_wh = self.servers[i].p_idle * dt / SECONDS_PER_HOUR;
            self.idle_hour[i].0 += idle_wh;
            self.idle_hour[i].1 += scaled_emissions(idle_wh, moer);
        }
    }

    fn location_draw(&self, loc: usize, now: SimTick) -> f64 {
        let t0 = now.as_f64();
        let dt = self.cfg.tick_s as f64;
        (0..self.servers.len())
            .filter(|&i| self.location_of[i] == loc && self.servers[i].online)
            .map(|i| {
                let busy: f64 = self.running[i]
                    .iter()
                    .flatten()
                    .map(|r| (r.end_s.min(t0 + dt) - r.start_s.max(t0)).max(0.0))
                    .sum();
                let n = self.servers[i].containers.len() as f64;
                power_draw(&self.servers[i], (busy / (n * dt)).clamp(0.0, 1.0)).expect("clamped")
            })
            .sum()
    }

    fn step_batteries(&mut self, now: SimTick) {
        let dt = self.cfg.tick_s as f64;
        for loc in 0..self.energy.len() {
            let load = self.location_draw(loc, now);
            let solar = self.solar_output(loc, now);
            let before = self.energy[loc].clone();
            let step = battery_step(&before, solar, load, dt);
            self.observer.on_battery_step(&BatteryRecord {
                time: now,
                before: &before,
                solar_w: solar,
                load_w: load,
                dt_s: dt,
                step: &step,
            });
            let threshold = self.cfg.critical_fraction * before.battery_capacity;
            if before.battery_level >= threshold && step.state.battery_level < threshold {
                self.m.critical_battery_events += 1;
            }
            let shutdown = step.shutdown;
            self.energy[loc] = step.state;
            if shutdown {
                self.shutdown_location(loc, now.plus(self.cfg.tick_s));
            }
        }
    }

    fn shutdown_location(&mut self, loc: usize, at: SimTick) {
        for i in 0..self.servers.len() {
            if self.location_of[i] != loc || !self.servers[i].online {
                continue;
            }
            for c in 0..self.running[i].len() {
                if let Some(r) = self.running[i][c].take() {
                    self.m.interrupted += 1;
                    self.emit_invocation(EventKind::Interrupted, at, i, r);
                }
            }
            let s = &mut self.servers[i];
            s.online = false;
            s.mem_used = 0;
            for c in &mut s.containers {
                *c = Default::default();
            }
            self.m.shutdown_count += 1;
            let mut ev = Event::bare(EventKind::Shutdown, at);
            ev.server_id = Some(self.server_ids[i].clone());
            ev.location_id = Some(self.location_ids[loc].clone());
            self.observer.on_event(&ev);
        }
    }

    fn flush_idle(&mut self, hour_start: SimTick) {
        for i in 0..self.servers.len() {
            let (wh, lbs) = std::mem::take(&mut self.idle_hour[i]);
            if wh == 0.0 && lbs == 0.0 {
                continue;
            }
            let mut e = Event::bare(EventKind::Idle, hour_start);
            e.server_id = Some(self.server_ids[i].clone());
            e.location_id = Some(self.location_ids[self.location_of[i]].clone());
            e.energy_wh = wh;
            e.emissions_lbs = lbs;
            self.observer.on_event(&e);
        }
    }

    fn finish(mut self) -> RunMetrics {
        let cutoff = SimTick(self.cfg.duration_s);
        for i in 0..self.servers.len() {
            for c in 0..self.running[i].len() {
                if let Some(r) = self.running[i][c].take() {
                    self.m.running_at_cutoff += 1;
                    self.emit_invocation(EventKind::Invocation, cutoff, i, r);
                }
            }
        }
        self.m.still_queued = self.balancer.queue.len() as u64;
        self.m.latency = LatencyStats::from_samples(std::mem::take(&mut self.latencies));
        self.m
    }
}

/// Runs every policy on the same workload in parallel and fills in emissions avoided
/// relative to the OpenWhisk-style baseline, which is run as well if absent.
pub fn run_policies(
    base: &SimConfig,
    policies: &[BalancerPolicy],
    workload: &Workload,
) -> Result<Vec<RunMetrics>, SimError> {
    let mut all: Vec<BalancerPolicy> = policies.to_vec();
    let baseline_requested = all.contains(&BalancerPolicy::OpenWhiskBaseline);
    if !baseline_requested {
        all.push(BalancerPolicy::OpenWhiskBaseline);
    }
    let results: Vec<Result<RunMetrics, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = all
            .iter()
            .map(|&policy| {
                let mut cfg = base.clone();
                cfg.policy = policy;
                scope.spawn(move || run(&cfg, workload))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut metrics = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let baseline_total = metrics
        .iter()
        .find(|m| m.policy == BalancerPolicy::OpenWhiskBaseline)
        .map(|m| m.total_emissions_lbs)
        .expect("baseline always run");
    for m in &mut metrics {
        m.emissions_avoided_vs_baseline_lbs = Some(baseline_total - m.total_emissions_lbs);
    }
    if !baseline_requested {
        metrics.pop();
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FunctionDef;
    use crate::traces::{gen_function_trace, reference_locations, FunctionTrace, WorkloadProfile};

    #[test]
    fn warm_cold_and_saturation() {
        let mut s = ServerState::new("s", "l", 3, 3.0, 7.0);
        assert_eq!(place_in_container(&mut s, 2, 0.0), Placement::ColdStart(0));
        assert_eq!(s.containers[0].current_type, Some(2));
        assert_eq!(place_in_container(&mut s, 2, 0.0), Placement::WarmStart(0));
        s.containers[0].current_type = Some(1);
        assert_eq!(place_in_container(&mut s, 4, 0.0), Placement::ColdStart(1));
        for c in &mut s.containers {
            c.busy_until = Some(10.0);
        }
        assert_eq!(place_in_container(&mut s, 1, 5.0), Placement::NoCapacity);
        assert_eq!(place_in_container(&mut s, 1, 10.0), Placement::WarmStart(0));
    }

    #[test]
    fn cold_start_retypes_busy_free_container() {
        let mut s = ServerState::new("s", "l", 3, 3.0, 7.0);
        for (i, c) in s.containers.iter_mut().enumerate() {
            c.current_type = Some(i as u32);
        }
        s.containers[0].busy_until = Some(100.0);
        assert_eq!(place_in_container(&mut s, 4, 1.0), Placement::ColdStart(1));
        assert_eq!(s.containers[1].current_type, Some(4));
    }

    #[test]
    fn spreading() {
        let sixty = spread_arrivals(60, 0);
        assert_eq!(sixty, (0..60).map(SimTick).collect::<Vec<_>>());
        let fifteen = spread_arrivals(15, 2);
        assert_eq!(fifteen, (0..15).map(|k| SimTick(120 + 4 * k)).collect::<Vec<_>>());
        assert!(spread_arrivals(0, 5).is_empty());
        assert!(spread_arrivals(1000, 1).iter().all(|t| (60..120).contains(&t.0)));
    }

    #[test]
    fn latency_examples() {
        let warm = ExecutionOutcome {
            arrival: SimTick(0),
            start: SimTick(0),
            start_kind: StartKind::Warm,
            exec_time_s: 1.0,
        };
        assert!((latency_of(&warm, 0.5, 0.005) - 1.005).abs() < 1e-12);
        let cold = ExecutionOutcome {
            start_kind: StartKind::Cold,
            ..warm
        };
        assert!((latency_of(&cold, 0.5, 0.005) - 1.5).abs() < 1e-12);
        let retried = ExecutionOutcome {
            start: SimTick(60),
            ..warm
        };
        assert!((latency_of(&retried, 0.5, 0.005) - 61.005).abs() < 1e-12);
    }

    #[test]
    fn latency_percentiles() {
        let s = LatencyStats::from_samples((1..=100).map(f64::from).collect());
        assert_eq!(s.count, 100);
        assert_eq!(s.p50_s, 50.0);
        assert_eq!(s.p95_s, 95.0);
        assert_eq!(s.p99_s, 99.0);
        assert_eq!(s.max_s, 100.0);
        assert!((s.mean_s - 50.5).abs() < 1e-12);
        assert_eq!(LatencyStats::from_samples(vec![]), LatencyStats::default());
    }

    fn constant_workload(counts: Vec<Vec<u32>>, functions: Vec<FunctionDef>, moer: f64) -> Workload {
        Workload {
            functions: FunctionTrace::new(functions, counts),
            carbon: vec![CarbonTrace {
                location_id: "loc".into(),
                samples: vec![(0, moer)],
            }],
            solar: vec![SolarTrace {
                location_id: "loc".into(),
                samples: vec![(0, 0.0)],
                array_watts: 1000.0,
            }],
        }
    }

    fn one_location(servers: u32) -> Vec<LocationSpec> {
        vec![LocationSpec {
            location_id: "loc".into(),
            avg_moer: 1000.0,
            avg_gti: 200.0,
            solar_array_w: 1000.0,
            battery_wh: 3800.0,
            servers,
        }]
    }

    #[test]
    fn idle_only_emissions() {
        let w = constant_workload(vec![vec![0]; 60], vec![FunctionDef::new("f", 0, 1.0)], 1000.0);
        let cfg = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::CarbonAware,
            1,
            3600,
            &one_location(2),
            ServerParams { p_idle: 3.0, p_peak: 7.0 },
        );
        let m = run(&cfg, &w).unwrap();
        // Two servers idling at 3 W for an hour at 1000 lbs/MWh.
        let expected = 2.0 * 3.0 * 1000.0 / 1e6;
        assert!((m.total_emissions_lbs - expected).abs() < 1e-12);
        assert_eq!(m.cold_starts, 0);
        assert_eq!(m.downtime_server_s, 0);
        assert_eq!(m.hourly_emissions_lbs.len(), 1);
    }

    #[test]
    fn single_invocation_minimal_path() {
        let mut counts = vec![vec![0]; 2];
        counts[0][0] = 1;
        let w = constant_workload(counts, vec![FunctionDef::new("f", 0, 1.0)], 1000.0);
        let cfg = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::CarbonAware,
            1,
            120,
            &one_location(1),
            ServerParams { p_idle: 3.0, p_peak: 7.0 },
        );
        let mut log = EventLog::default();
        let m = run_observed(&cfg, &w, &mut log).unwrap();
        assert_eq!(m.executed, 1);
        assert_eq!(m.cold_starts, 1);
        assert_eq!(m.failed_invocations, 0);
        assert!((m.latency.mean_s - 1.5).abs() < 1e-12);
        let inv: Vec<&Event> = log.events.iter().filter(|e| e.kind == EventKind::Invocation).collect();
        assert_eq!(inv.len(), 1);
        // 1.5 s at a third of the 4 W dynamic range.
        assert!((inv[0].energy_wh - 1.5 * 4.0 / 3.0 / 3600.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let locations = reference_locations(3);
        let w = Workload::synthetic(WorkloadProfile::Medium, 2 * 3600, &locations, 42);
        for mode in [Mode::GridConnected, Mode::GridIsolated] {
            for policy in BalancerPolicy::ALL {
                let cfg = SimConfig::from_locations(mode, policy, 42, 2 * 3600, &locations, ServerParams::default());
                let mut a = EventLog::default();
                let mut b = EventLog::default();
                let ma = run_observed(&cfg, &w, &mut a).unwrap();
                let mb = run_observed(&cfg, &w, &mut b).unwrap();
                assert_eq!(ma, mb);
                assert_eq!(a.events, b.events);
            }
        }
    }

    #[test]
    fn conservation_and_accounting() {
        let locations = reference_locations(4);
        let w = Workload::synthetic(WorkloadProfile::High, 3 * 3600, &locations, 3);
        for mode in [Mode::GridConnected, Mode::GridIsolated] {
            for policy in BalancerPolicy::ALL {
                let cfg = SimConfig::from_locations(mode, policy, 3, 3 * 3600, &locations, ServerParams::default());
                let mut log = EventLog::default();
                let m = run_observed(&cfg, &w, &mut log).unwrap();
                assert_eq!(m.arrivals, w.functions.total_invocations());
                assert_eq!(m.arrivals, m.executed + m.failed_invocations + m.still_queued);
                assert_eq!(m.cold_starts + m.warm_starts, m.executed);
                assert!(m.downtime_server_s <= m.num_servers as u64 * m.duration_s);
                if mode == Mode::GridConnected {
                    assert_eq!(m.downtime_server_s, 0);
                    let resum: f64 = log.events.iter().map(|e| e.emissions_lbs).sum();
                    assert!((resum - m.total_emissions_lbs).abs() < 1e-6, "{policy}");
                } else {
                    assert_eq!(m.total_emissions_lbs, 0.0);
                }
                let energy: f64 = log.events.iter().map(|e| e.energy_wh).sum();
                assert!((energy - m.total_energy_wh).abs() < 1e-6 * m.total_energy_wh.max(1.0));
            }
        }
    }

    #[test]
    fn short_function_trace_is_rejected() {
        let locations = reference_locations(1);
        let mut w = Workload::synthetic(WorkloadProfile::Rare, 600, &locations, 1);
        w.functions = gen_function_trace(WorkloadProfile::Rare, 5, 1);
        let cfg = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::Greedy,
            1,
            600,
            &locations,
            ServerParams::default(),
        );
        assert!(matches!(run(&cfg, &w), Err(SimError::FunctionTraceTooShort { have: 5, need: 10 })));
    }

    #[test]
    fn missing_carbon_trace_is_rejected() {
        let locations = reference_locations(2);
        let mut w = Workload::synthetic(WorkloadProfile::Rare, 600, &locations, 1);
        w.carbon.pop();
        let cfg = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::Greedy,
            1,
            600,
            &locations,
            ServerParams::default(),
        );
        assert!(matches!(run(&cfg, &w), Err(SimError::MissingTrace { kind: "carbon", .. })));
    }

    #[test]
    fn config_validation() {
        let locations = reference_locations(1);
        let mut cfg = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::Greedy,
            1,
            601,
            &locations,
            ServerParams::default(),
        );
        cfg.tick_s = 2;
        assert!(cfg.validate().is_err());
        cfg.tick_s = 1;
        assert!(cfg.validate().is_ok());
        cfg.servers[0].location_id = "elsewhere".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dark_isolated_site_goes_down_and_queues() {
        let w = Workload {
            functions: gen_function_trace(WorkloadProfile::Medium, 120, 1),
            carbon: vec![],
            solar: vec![SolarTrace {
                location_id: "loc".into(),
                samples: vec![(0, 0.0)],
                array_watts: 1000.0,
            }],
        };
        let mut cfg = SimConfig::from_locations(
            Mode::GridIsolated,
            BalancerPolicy::CarbonAware,
            1,
            7200,
            &one_location(2),
            ServerParams::default(),
        );
        cfg.locations[0].battery_wh = 100.0;
        let m = run(&cfg, &w).unwrap();
        assert_eq!(m.shutdown_count, 2);
        assert!(m.downtime_server_s > 0);
        assert!(m.failed_invocations > 0);
        assert_eq!(m.restart_count, 0);
        assert_eq!(m.critical_battery_events, 1);
        assert_eq!(m.arrivals, m.executed + m.failed_invocations + m.still_queued);
    }

    #[test]
    fn stale_profiles_delay_first_decisions() {
        let locations = reference_locations(2);
        let w = Workload::synthetic(WorkloadProfile::Medium, 600, &locations, 5);
        let mut cfg = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::CarbonAware,
            5,
            600,
            &locations,
            ServerParams::default(),
        );
        cfg.profile_delay_s = 30;
        let mut log = EventLog::default();
        let m = run_observed(&cfg, &w, &mut log).unwrap();
        let first_start = log
            .events
            .iter()
            .filter_map(|e| e.start)
            .min()
            .unwrap();
        assert!(first_start.0 >= 30);
        assert_eq!(m.arrivals, m.executed + m.failed_invocations + m.still_queued);
    }

    #[test]
    fn sweep_fills_avoided_emissions() {
        let locations = reference_locations(3);
        let w = Workload::synthetic(WorkloadProfile::Medium, 3600, &locations, 8);
        let cfg = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::CarbonAware,
            8,
            3600,
            &locations,
            ServerParams::default(),
        );
        let out = run_policies(&cfg, &[BalancerPolicy::Greedy], &w).unwrap();
        assert_eq!(out.len(), 1);
        let baseline = {
            let mut c = cfg.clone();
            c.policy = BalancerPolicy::OpenWhiskBaseline;
            run(&c, &w).unwrap()
        };
        assert_eq!(out[0].emissions_avoided_vs_baseline_lbs, Some(emissions_avoided(&baseline, &out[0])));
    }
}
