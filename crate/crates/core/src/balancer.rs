//! Server selection policies and the controller-side retry queue.
//!
//! Every policy sees the cluster through a [`ClusterView`]: the controller's own
//! memory counters plus the most recent energy-profile snapshot delivered for each
//! location. Snapshots may be stale; memory counters are always current.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{avail_energy, EnergyProfileMsg};
use crate::model::{InvocationRequest, Mode, ServerState, SimTick};
use crate::ring::{hash_to_unit, weighted_order, RingPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalancerError {
    #[error("carbon intensity must be positive, got {0}")]
    NonPositiveIntensity(f64),
    #[error("unknown policy {0:?} (expected carbon-aware, openwhisk, consistent-hashing or greedy)")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalancerPolicy {
    /// Weighted consistent hashing: ring distance scaled by carbon or energy weight.
    CarbonAware,
    /// Home server on the ring; random redirect when its memory counter is full.
    #[serde(rename = "openwhisk")]
    OpenWhiskBaseline,
    /// Clockwise ring walk without weights.
    ConsistentHashing,
    /// Cleanest grid or most available energy, ignoring locality.
    Greedy,
}

impl BalancerPolicy {
    pub const ALL: [BalancerPolicy; 4] = [
        BalancerPolicy::CarbonAware,
        BalancerPolicy::OpenWhiskBaseline,
        BalancerPolicy::ConsistentHashing,
        BalancerPolicy::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BalancerPolicy::CarbonAware => "carbon-aware",
            BalancerPolicy::OpenWhiskBaseline => "openwhisk",
            BalancerPolicy::ConsistentHashing => "consistent-hashing",
            BalancerPolicy::Greedy => "greedy",
        }
    }
}

impl fmt::Display for BalancerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BalancerPolicy {
    type Err = BalancerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        BalancerPolicy::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| BalancerError::UnknownPolicy(s.to_string()))
    }
}

/// Clamps negative availability to zero and normalizes. `None` when nothing is left.
pub fn weights_grid_isolated(avail: &[f64]) -> Option<Vec<f64>> {
    let clamped: Vec<f64> = avail.iter().map(|a| a.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    Some(clamped.into_iter().map(|a| a / total).collect())
}

/// Inverse-normalized carbon intensity: cleaner grids get larger weights.
pub fn weights_grid_connected(ci: &[f64]) -> Result<Vec<f64>, BalancerError> {
    if let Some(bad) = ci.iter().find(|c| !(**c > 0.0)) {
        return Err(BalancerError::NonPositiveIntensity(*bad));
    }
    let total: f64 = ci.iter().map(|c| 1.0 / c).sum();
    Ok(ci.iter().map(|c| (1.0 / c) / total).collect())
}

/// Smallest intensity used for weighting. Real MOER series can contain zeros.
const MIN_INTENSITY: f64 = 1e-6;

/// Controller view of the cluster at decision time.
#[derive(Debug, Clone, Copy)]
pub struct ClusterView<'a> {
    pub mode: Mode,
    pub servers: &'a [ServerState],
    /// Location index of each server.
    pub location_of: &'a [usize],
    /// Latest delivered snapshot per location index.
    pub snapshots: &'a [Option<EnergyProfileMsg>],
    /// Memory units one invocation occupies.
    pub mem_cost: u32,
}

impl<'a> ClusterView<'a> {
    /// Power estimate of one invocation on server `i`: its dynamic range split evenly
    /// across its containers.
    pub fn request_power_estimate(&self, i: usize) -> f64 {
        let s = &self.servers[i];
        (s.p_peak - s.p_idle) / s.containers.len().max(1) as f64
    }

    /// Power of the functions the controller has placed at location `loc`.
    pub fn location_running_load(&self, loc: usize) -> f64 {
        let cost = self.mem_cost.max(1) as f64;
        self.servers
            .iter()
            .enumerate()
            .filter(|(i, _)| self.location_of[*i] == loc)
            .map(|(i, s)| s.mem_used as f64 / cost * self.request_power_estimate(i))
            .sum()
    }

    pub fn location_avail_energy(&self, loc: usize) -> Option<f64> {
        let snap = self.snapshots.get(loc)?.as_ref()?;
        let energy = snap.energy.as_ref()?;
        Some(avail_energy(energy, self.location_running_load(loc)))
    }

    pub fn carbon_intensity(&self, loc: usize) -> Option<f64> {
        self.snapshots.get(loc)?.as_ref()?.carbon_intensity
    }

    fn has_room(&self, i: usize) -> bool {
        let s = &self.servers[i];
        s.online && s.has_memory_for(self.mem_cost)
    }

    fn energy_ok(&self, i: usize, avail: f64) -> bool {
        avail >= self.request_power_estimate(i)
    }
}

/// Outcome of a single placement decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Assigned(usize),
    Enqueued,
    Failed,
}

/// Picks a server index for a function at `function`, or `None` when no server is
/// feasible. Does not touch the retry queue.
pub fn choose_server<R: Rng + ?Sized>(
    policy: BalancerPolicy,
    view: &ClusterView<'_>,
    function: RingPoint,
    rng: &mut R,
) -> Option<usize> {
    match policy {
        BalancerPolicy::CarbonAware => choose_carbon_aware(view, function),
        BalancerPolicy::OpenWhiskBaseline => choose_openwhisk(view, function, rng),
        BalancerPolicy::ConsistentHashing => ring_order(view, function)
            .into_iter()
            .find(|&i| view.has_room(i)),
        BalancerPolicy::Greedy => choose_greedy(view),
    }
}

/// Placement decision for `request`: assigned, deferred to the retry queue, or failed
/// once the retry budget is spent.
pub fn select_server<R: Rng + ?Sized>(
    policy: BalancerPolicy,
    view: &ClusterView<'_>,
    request: &InvocationRequest,
    max_retries: u32,
    rng: &mut R,
) -> Selection {
    let point = hash_to_unit(request.function.id.as_bytes());
    match choose_server(policy, view, point, rng) {
        Some(i) => Selection::Assigned(i),
        None if request.retry_count >= max_retries => Selection::Failed,
        None => Selection::Enqueued,
    }
}

fn ring_order(view: &ClusterView<'_>, function: RingPoint) -> Vec<usize> {
    weighted_order(
        view.servers.iter().map(|s| (s.id.as_str(), s.ring_position, 1.0)),
        function,
    )
    .unwrap_or_default()
}

fn choose_openwhisk<R: Rng + ?Sized>(
    view: &ClusterView<'_>,
    function: RingPoint,
    rng: &mut R,
) -> Option<usize> {
    let home = *ring_order(view, function).first()?;
    if view.has_room(home) {
        return Some(home);
    }
    let others: Vec<usize> = (0..view.servers.len())
        .filter(|&i| i != home && view.has_room(i))
        .collect();
    if others.is_empty() {
        None
    } else {
        Some(others[rng.gen_range(0..others.len())])
    }
}

fn choose_carbon_aware(view: &ClusterView<'_>, function: RingPoint) -> Option<usize> {
    match view.mode {
        Mode::GridConnected => {
            let (idx, ci): (Vec<usize>, Vec<f64>) = (0..view.servers.len())
                .filter_map(|i| {
                    view.carbon_intensity(view.location_of[i])
                        .map(|c| (i, c.max(MIN_INTENSITY)))
                })
                .unzip();
            if idx.is_empty() {
                return None;
            }
            let weights = weights_grid_connected(&ci).ok()?;
            let order = weighted_order(
                idx.iter().zip(&weights).map(|(&i, &w)| {
                    let s = &view.servers[i];
                    (s.id.as_str(), s.ring_position, w)
                }),
                function,
            )
            .ok()?;
            order.into_iter().map(|k| idx[k]).find(|&i| view.has_room(i))
        }
        Mode::GridIsolated => {
            let (idx, avail): (Vec<usize>, Vec<f64>) = (0..view.servers.len())
                .filter_map(|i| view.location_avail_energy(view.location_of[i]).map(|a| (i, a)))
                .unzip();
            let weights = weights_grid_isolated(&avail)?;
            let members: Vec<(usize, f64, f64)> = idx
                .iter()
                .zip(&weights)
                .zip(&avail)
                .filter(|((_, w), _)| **w > 0.0)
                .map(|((&i, &w), &a)| (i, w, a))
                .collect();
            let order = weighted_order(
                members.iter().map(|&(i, w, _)| {
                    let s = &view.servers[i];
                    (s.id.as_str(), s.ring_position, w)
                }),
                function,
            )
            .ok()?;
            order
                .into_iter()
                .map(|k| members[k])
                .find(|&(i, _, a)| view.has_room(i) && view.energy_ok(i, a))
                .map(|(i, _, _)| i)
        }
    }
}

fn choose_greedy(view: &ClusterView<'_>) -> Option<usize> {
    let servers = view.servers;
    match view.mode {
        Mode::GridConnected => {
            let mut ranked: Vec<(f64, usize)> = (0..servers.len())
                .filter_map(|i| view.carbon_intensity(view.location_of[i]).map(|c| (c, i)))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| servers[a.1].id.cmp(&servers[b.1].id)));
            ranked.into_iter().map(|(_, i)| i).find(|&i| view.has_room(i))
        }
        Mode::GridIsolated => {
            let mut ranked: Vec<(f64, usize)> = (0..servers.len())
                .filter_map(|i| view.location_avail_energy(view.location_of[i]).map(|a| (a, i)))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| servers[a.1].id.cmp(&servers[b.1].id)));
            ranked
                .into_iter()
                .find(|&(a, i)| view.has_room(i) && view.energy_ok(i, a))
                .map(|(_, i)| i)
        }
    }
}

#[derive(Debug, Clone)]
struct QueuedRequest {
    request: InvocationRequest,
    last_enqueued: SimTick,
}

/// Deferred invocations, served oldest-first by first enqueue time.
#[derive(Debug, Clone)]
pub struct RetryQueue {
    entries: BTreeMap<(SimTick, u64), QueuedRequest>,
    // Keys in last-enqueue order; enqueue times never decrease, so this is also due order.
    due_order: VecDeque<(SimTick, (SimTick, u64))>,
    retry_interval: u64,
    max_retries: u32,
}

impl RetryQueue {
    pub const DEFAULT_RETRY_INTERVAL: u64 = 60;
    pub const DEFAULT_MAX_RETRIES: u32 = 3;

    pub fn new(retry_interval: u64, max_retries: u32) -> Self {
        RetryQueue {
            entries: BTreeMap::new(),
            due_order: VecDeque::new(),
            retry_interval,
            max_retries,
        }
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    pub fn retry_interval(&self) -> u64 {
        self.retry_interval
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Defers `request`, bumping its retry count. Hands the request back when its
    /// retry budget is already spent.
    pub fn enqueue(
        &mut self,
        mut request: InvocationRequest,
        now: SimTick,
    ) -> Result<(), InvocationRequest> {
        if request.retry_count >= self.max_retries {
            return Err(request);
        }
        request.retry_count += 1;
        let first = *request.first_enqueued.get_or_insert(now);
        let key = (first, request.seq);
        if let Some(last) = self.due_order.back() {
            debug_assert!(last.0 <= now, "enqueue times must not go backwards");
        }
        self.due_order.push_back((now, key));
        self.entries.insert(
            key,
            QueuedRequest {
                request,
                last_enqueued: now,
            },
        );
        Ok(())
    }

    /// Removes every entry whose retry interval has elapsed, oldest first-enqueue first.
    pub fn drain_due(&mut self, now: SimTick) -> Vec<InvocationRequest> {
        let mut keys = Vec::new();
        while let Some(&(last, key)) = self.due_order.front() {
            if last.plus(self.retry_interval) > now {
                break;
            }
            self.due_order.pop_front();
            keys.push(key);
        }
        keys.sort();
        keys.into_iter()
            .filter_map(|k| self.entries.remove(&k))
            .map(|q| {
                debug_assert!(q.last_enqueued.plus(self.retry_interval) <= now);
                q.request
            })
            .collect()
    }

    /// Entries in service order.
    pub fn iter(&self) -> impl Iterator<Item = &InvocationRequest> {
        self.entries.values().map(|q| &q.request)
    }
}

impl Default for RetryQueue {
    fn default() -> Self {
        RetryQueue::new(Self::DEFAULT_RETRY_INTERVAL, Self::DEFAULT_MAX_RETRIES)
    }
}

/// What happened to a submitted request.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Assigned(usize, InvocationRequest),
    Enqueued,
    Failed(InvocationRequest),
}

/// A policy bound to its retry queue.
#[derive(Debug, Clone)]
pub struct Balancer {
    pub policy: BalancerPolicy,
    pub queue: RetryQueue,
    /// Grid-connected extension: defer carbon-aware placements onto grids above this
    /// intensity while retries remain.
    pub retry_on_high_carbon: Option<f64>,
}

impl Balancer {
    pub fn new(policy: BalancerPolicy, queue: RetryQueue) -> Self {
        Balancer {
            policy,
            queue,
            retry_on_high_carbon: None,
        }
    }

    pub fn submit<R: Rng + ?Sized>(
        &mut self,
        request: InvocationRequest,
        view: &ClusterView<'_>,
        now: SimTick,
        rng: &mut R,
    ) -> Outcome {
        let max = self.queue.max_retries();
        let mut selection = select_server(self.policy, view, &request, max, rng);
        if let (Selection::Assigned(i), Some(threshold), BalancerPolicy::CarbonAware, Mode::GridConnected) =
            (selection, self.retry_on_high_carbon, self.policy, view.mode)
        {
            let dirty = view
                .carbon_intensity(view.location_of[i])
                .is_some_and(|c| c > threshold);
            if dirty && request.retry_count < max {
                selection = Selection::Enqueued;
            }
        }
        match selection {
            Selection::Assigned(i) => Outcome::Assigned(i, request),
            Selection::Failed => Outcome::Failed(request),
            Selection::Enqueued => match self.queue.enqueue(request, now) {
                Ok(()) => Outcome::Enqueued,
                Err(request) => Outcome::Failed(request),
            },
        }
    }
}
