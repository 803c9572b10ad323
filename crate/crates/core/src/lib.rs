//! Discrete-time simulator for carbon- and energy-aware placement of serverless
//! invocations across geographically distributed servers.
//!
//! - [`model`]: servers, containers, functions and requests
//! - [`ring`]: unit-circle hashing and weighted ordering
//! - [`energy`]: power, battery and emissions models, profile delivery
//! - [`balancer`]: placement policies and the retry queue
//! - [`engine`]: the tick loop and run metrics
//! - [`traces`]: synthetic generators and CSV trace I/O

pub mod balancer;
pub mod energy;
pub mod engine;
pub mod model;
pub mod ring;
pub mod traces;

pub use balancer::BalancerPolicy;
pub use engine::{run, run_observed, run_policies, RunMetrics, SimConfig};
pub use model::{Mode, SimTick};
pub use traces::Workload;
