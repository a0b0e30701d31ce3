//! Probabilistic consistency/latency tradeoff toolkit.
//!
//! The crate is organised around an operation log ([`model::OpRecord`]):
//!
//! * [`metrics`] turns a log into t-freshness verdicts and the `p_ic` / `p_ua`
//!   fractions, plus the end-time based t-visibility alternative.
//! * [`envelope`] computes the soft-partition parameter `α` of a network and
//!   the optimal achievable consistency/latency envelope.
//! * [`sim`] is a deterministic discrete-event simulation of a replicated
//!   key-value store with read delay, read repair and consistency-level knobs.
//! * [`controller`] is the multiplicative SLA control loop that drives the
//!   simulator's knobs from measured windows.
//! * [`geo`] composes per-data-center models across a WAN and runs the
//!   geo-delay PID loop.
//! * [`scenario`] wires everything into reproducible experiments that emit
//!   CSV timelines.
//!
//! All simulated time is integer microseconds ([`Micros`]).

pub mod controller;
pub mod delay;
pub mod envelope;
pub mod geo;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod sim;
mod time;
pub mod verify;

pub use controller::{ControllerConfig, ControllerState, Knob};
pub use delay::{DelayModel, DelayVariant};
pub use envelope::{compute_alpha, optimal_p_ic, optimal_p_ua, Topology, Verdict};
pub use metrics::{compute_metrics, compute_t_visibility, MetricReport, MetricsError};
pub use model::{
    ConsistencyLevel, ConsistencySla, KnobState, LatencySla, OpKind, OpRecord, PartitionModel,
    Sla, WriteRef,
};
pub use time::Micros;
