use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{DelayError, DelayModel, Jitter};
use crate::model::{ConsistencyLevel, KnobError, DEFAULT_MAX_READ_DELAY};
use crate::Micros;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("need at least one server")]
    NoServers,
    #[error("replication factor {rf} must be in 1..={n}")]
    ReplicationFactor { rf: usize, n: usize },
    #[error("read fraction {0} outside [0, 1]")]
    ReadFraction(f64),
    #[error("throughput {0} must be finite and non-negative")]
    Throughput(f64),
    #[error("mutation drop probability {0} outside [0, 1)")]
    DropProbability(f64),
    #[error("key space is empty")]
    NoKeys,
    #[error("zipf exponent {0} must be positive")]
    Zipf(f64),
    #[error("repair interval must be positive")]
    RepairInterval,
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Knob(#[from] KnobError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyDistribution {
    Uniform,
    Zipfian { exponent: f64 },
}

fn d_servers() -> usize {
    9
}
fn d_rf() -> usize {
    3
}
fn d_cl() -> ConsistencyLevel {
    ConsistencyLevel::One
}
fn d_throughput() -> f64 {
    1000.0
}
fn d_read_fraction() -> f64 {
    0.8
}
fn d_keys() -> u64 {
    10_000
}
fn d_keydist() -> KeyDistribution {
    KeyDistribution::Uniform
}
fn d_value_size() -> usize {
    2048
}
fn d_delay() -> DelayModel {
    DelayModel::zero()
}
fn d_write_timeout() -> Micros {
    Micros::from_secs(2)
}
fn d_repair_interval() -> Micros {
    Micros::from_ms(10)
}
fn d_repair_capacity() -> usize {
    1024
}
fn d_max_read_delay() -> Micros {
    DEFAULT_MAX_READ_DELAY
}
fn d_true() -> bool {
    true
}

/// Static description of the simulated cluster and its workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default = "d_servers")]
    pub n_servers: usize,
    #[serde(default = "d_rf")]
    pub replication_factor: usize,
    /// Initial consistency level.
    #[serde(default = "d_cl")]
    pub consistency_level: ConsistencyLevel,
    /// Background workload rate; zero disables it.
    #[serde(default = "d_throughput")]
    pub throughput_ops_per_s: f64,
    #[serde(default = "d_read_fraction")]
    pub read_fraction: f64,
    #[serde(default = "d_keys")]
    pub n_keys: u64,
    #[serde(default = "d_keydist")]
    pub key_distribution: KeyDistribution,
    /// Recorded only; payloads are not simulated.
    #[serde(default = "d_value_size")]
    pub value_size: usize,
    #[serde(default = "d_delay")]
    pub delay: DelayModel,
    #[serde(default)]
    pub seed: u64,
    /// Replica processing time before a response or ack leaves.
    #[serde(default)]
    pub service_time: Jitter,
    /// Chance that a replica loses an incoming mutation.
    #[serde(default)]
    pub mutation_drop: f64,
    /// A write is acknowledged to its client after this long even if too
    /// few replicas answered.
    #[serde(default = "d_write_timeout")]
    pub write_timeout: Micros,
    #[serde(default = "d_repair_interval")]
    pub repair_interval: Micros,
    /// Pending repairs kept; the oldest is dropped when full.
    #[serde(default = "d_repair_capacity")]
    pub repair_capacity: usize,
    #[serde(default = "d_max_read_delay")]
    pub max_read_delay: Micros,
    /// Keep workload operations in the log. Controller probes are always
    /// reported separately.
    #[serde(default = "d_true")]
    pub log_workload: bool,
    /// Record every processed event.
    #[serde(default)]
    pub trace: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_servers: d_servers(),
            replication_factor: d_rf(),
            consistency_level: d_cl(),
            throughput_ops_per_s: d_throughput(),
            read_fraction: d_read_fraction(),
            n_keys: d_keys(),
            key_distribution: d_keydist(),
            value_size: d_value_size(),
            delay: d_delay(),
            seed: 0,
            service_time: Jitter::default(),
            mutation_drop: 0.0,
            write_timeout: d_write_timeout(),
            repair_interval: d_repair_interval(),
            repair_capacity: d_repair_capacity(),
            max_read_delay: d_max_read_delay(),
            log_workload: true,
            trace: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_servers == 0 {
            return Err(ConfigError::NoServers);
        }
        if self.replication_factor == 0 || self.replication_factor > self.n_servers {
            return Err(ConfigError::ReplicationFactor {
                rf: self.replication_factor,
                n: self.n_servers,
            });
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(ConfigError::ReadFraction(self.read_fraction));
        }
        if !self.throughput_ops_per_s.is_finite() || self.throughput_ops_per_s < 0.0 {
            return Err(ConfigError::Throughput(self.throughput_ops_per_s));
        }
        if !(0.0..1.0).contains(&self.mutation_drop) {
            return Err(ConfigError::DropProbability(self.mutation_drop));
        }
        if self.n_keys == 0 {
            return Err(ConfigError::NoKeys);
        }
        if let KeyDistribution::Zipfian { exponent } = self.key_distribution {
            if !(exponent > 0.0) {
                return Err(ConfigError::Zipf(exponent));
            }
        }
        if self.repair_interval == Micros::ZERO {
            return Err(ConfigError::RepairInterval);
        }
        self.delay.validate(self.n_servers)?;
        self.service_time.validate()?;
        Ok(())
    }
}
