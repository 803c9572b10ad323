//! Domain types shared by the ring, energy, balancer and engine modules.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTick(pub u64);

impl SimTick {
    pub const ZERO: SimTick = SimTick(0);

    pub fn seconds(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }

    pub fn plus(self, secs: u64) -> SimTick {
        SimTick(self.0 + secs)
    }
}

impl fmt::Display for SimTick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Operating mode of the whole platform. Fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Servers draw grid power; energy is always available, carbon intensity varies.
    #[serde(alias = "grid")]
    GridConnected,
    /// Servers run on local solar and a shared per-location battery; carbon is zero.
    #[serde(alias = "isolated")]
    GridIsolated,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::GridConnected => "grid",
            Mode::GridIsolated => "isolated",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grid" | "grid-connected" => Ok(Mode::GridConnected),
            "isolated" | "grid-isolated" => Ok(Mode::GridIsolated),
            other => Err(ModelError::UnknownMode(other.to_string())),
        }
    }
}

/// A registered function. Cloning is cheap: the id is reference counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionDef {
    pub id: Arc<str>,
    pub func_type: u32,
    /// Mean execution time in seconds.
    pub mean_exec_time: f64,
}

impl FunctionDef {
    pub fn new(id: impl Into<Arc<str>>, func_type: u32, mean_exec_time: f64) -> Self {
        FunctionDef {
            id: id.into(),
            func_type,
            mean_exec_time,
        }
    }

    pub fn validate(&self, num_types: u32) -> Result<(), ModelError> {
        if self.func_type >= num_types {
            return Err(ModelError::FunctionType {
                id: self.id.to_string(),
                func_type: self.func_type,
                num_types,
            });
        }
        if !(self.mean_exec_time > 0.0 && self.mean_exec_time.is_finite()) {
            return Err(ModelError::ExecTime {
                id: self.id.to_string(),
                value: self.mean_exec_time,
            });
        }
        Ok(())
    }
}

/// One invocation travelling through the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationRequest {
    /// Run-unique sequence number, assigned at arrival.
    pub seq: u64,
    pub function: FunctionDef,
    pub arrival: SimTick,
    pub retry_count: u32,
    pub first_enqueued: Option<SimTick>,
}

impl InvocationRequest {
    pub fn new(seq: u64, function: FunctionDef, arrival: SimTick) -> Self {
        InvocationRequest {
            seq,
            function,
            arrival,
            retry_count: 0,
            first_enqueued: None,
        }
    }
}

/// A container on an invoker. `busy_until` is fractional seconds because execution
/// times are not tick aligned.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContainerSlot {
    pub current_type: Option<u32>,
    pub busy_until: Option<f64>,
}

impl ContainerSlot {
    pub fn is_free_at(&self, now: f64) -> bool {
        match self.busy_until {
            None => true,
            Some(until) => until <= now,
        }
    }
}

/// An invoker as tracked by the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub id: String,
    pub location_id: String,
    pub ring_position: f64,
    /// Memory counter limit, in abstract units.
    pub mem_limit: u32,
    pub mem_used: u32,
    pub containers: Vec<ContainerSlot>,
    /// Idle power in watts.
    pub p_idle: f64,
    /// Peak power in watts.
    pub p_peak: f64,
    pub online: bool,
}

impl ServerState {
    /// Builds a server whose ring position is the hash of its id, with the memory limit
    /// equal to the container count.
    pub fn new(
        id: impl Into<String>,
        location_id: impl Into<String>,
        containers: usize,
        p_idle: f64,
        p_peak: f64,
    ) -> Self {
        let id = id.into();
        let ring_position = crate::ring::hash_to_unit(id.as_bytes()).position();
        ServerState {
            id,
            location_id: location_id.into(),
            ring_position,
            mem_limit: containers as u32,
            mem_used: 0,
            containers: vec![ContainerSlot::default(); containers],
            p_idle,
            p_peak,
            online: true,
        }
    }

    pub fn busy_containers(&self, now: f64) -> usize {
        self.containers.iter().filter(|c| !c.is_free_at(now)).count()
    }

    pub fn has_memory_for(&self, cost: u32) -> bool {
        self.mem_used + cost <= self.mem_limit
    }
}

/// Reports every violated invariant, not only the first.
pub fn validate_server(s: &ServerState) -> Result<(), ModelError> {
    let mut violations = Vec::new();
    if !(0.0..1.0).contains(&s.ring_position) {
        violations.push("ring_position out of [0,1)".to_string());
    }
    if s.mem_used > s.mem_limit {
        violations.push(format!(
            "memory overcommit ({} used > {} limit)",
            s.mem_used, s.mem_limit
        ));
    }
    if !(s.p_idle > 0.0) {
        violations.push(format!("p_idle must be positive, got {}", s.p_idle));
    }
    if !(s.p_peak >= s.p_idle) {
        violations.push(format!(
            "p_peak {} below p_idle {}",
            s.p_peak, s.p_idle
        ));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ModelError::InvalidServer {
            id: s.id.clone(),
            violations,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("server {id}: {}", violations.join("; "))]
    InvalidServer { id: String, violations: Vec<String> },
    #[error("function {id}: type {func_type} not below the configured {num_types} types")]
    FunctionType {
        id: String,
        func_type: u32,
        num_types: u32,
    },
    #[error("function {id}: mean execution time must be positive, got {value}")]
    ExecTime { id: String, value: f64 },
    #[error("unknown mode {0:?} (expected grid or isolated)")]
    UnknownMode(String),
}
