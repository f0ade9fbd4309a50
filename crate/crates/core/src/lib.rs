//! Distributed linear filtering over directed sensor networks.
//!
//! Every agent of the network runs a single-time-scale filter that treats the
//! disagreement with its in-neighbors' predictions as additional innovations
//! alongside the measurements of its closed neighborhood. The crate covers
//! the whole pipeline:
//!
//! * [`model`] and [`scenario`]: the state-space-network model and its JSON form.
//! * [`observability`]: distributed observability through the walk structure
//!   of the communication graph.
//! * [`gain`]: offline MMSE gain synthesis via the network error covariance
//!   recursion, its fixed point and closed-loop spectral radii.
//! * [`estimator`]: the online per-agent predict / exchange / filter round.
//! * [`simulator`]: ground truth, sensor noise, a centralized Kalman filter
//!   baseline and a reproducible Monte Carlo harness.

pub mod estimator;
pub mod gain;
pub mod linalg;
pub mod model;
pub mod observability;
pub mod scenario;
pub mod simulator;

pub use estimator::{AgentState, DistributedEstimator, InnovationVector, ProtocolError, RoundMessage};
pub use gain::{
    riccati_recursion, steady_state, AgentGain, GainError, GainSchedule, InnovationStructure,
    NetworkCovariance, SteadyState, SteadyStateOptions,
};
pub use model::{
    validate, AgentId, AgentObservation, ModelError, NetworkGraph, StateSpaceNetwork, SystemModel,
    ValidationReport,
};
pub use observability::{analyze, ObservabilityReport};
pub use scenario::{load_scenario, parse_scenario, scenario_hash, ScenarioError};
pub use simulator::{GainPlan, MetricsSummary, SimulationTrace};
