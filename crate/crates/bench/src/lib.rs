//! Inputs shared by the benchmarks.

use pcapsim_core::sim::ClusterConfig;
use pcapsim_core::{DelayModel, Micros, OpRecord};

/// A valid random log of `n_ops` operations over a handful of keys.
pub fn log(seed: u64, n_ops: usize) -> Vec<OpRecord> {
    pcapsim_core::verify::random_log(seed, n_ops, 0.4)
}

/// Nine servers, constant 5 ms links, 1000 ops/s over 20 keys.
pub fn cluster(seed: u64) -> ClusterConfig {
    ClusterConfig {
        n_keys: 20,
        delay: DelayModel::constant(Micros::from_ms(5)),
        seed,
        ..ClusterConfig::default()
    }
}
