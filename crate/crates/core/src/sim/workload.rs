//! Open-loop synthetic workload: Poisson arrivals, read/write mix, uniform
//! or zipfian keys, clients spread evenly over the servers' machines.

use rand::Rng;
use rand_distr::{Distribution, Exp, Zipf};

use super::config::{ClusterConfig, KeyDistribution};
use crate::model::OpKind;
use crate::rng::{self, SimRng, Stream};
use crate::Micros;

/// An operation to issue: what, on which key, from which machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpRequest {
    pub kind: OpKind,
    pub key: u64,
    pub client: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arrival {
    pub at: Micros,
    pub request: OpRequest,
}

enum Keys {
    Uniform(u64),
    Zipf(Zipf<f64>),
}

pub struct Workload {
    rng: SimRng,
    gap: Option<Exp<f64>>,
    read_fraction: f64,
    keys: Keys,
    n_clients: usize,
    next_at: Micros,
}

impl Workload {
    pub fn new(config: &ClusterConfig) -> Self {
        let keys = match config.key_distribution {
            KeyDistribution::Uniform => Keys::Uniform(config.n_keys),
            KeyDistribution::Zipfian { exponent } => match Zipf::new(config.n_keys as f64, exponent) {
                Ok(z) => Keys::Zipf(z),
                Err(_) => Keys::Uniform(config.n_keys),
            },
        };
        let rate = config.throughput_ops_per_s;
        let mut w = Workload {
            rng: rng::stream(config.seed, Stream::Workload),
            gap: (rate > 0.0).then(|| Exp::new(rate / 1e6)).and_then(Result::ok),
            read_fraction: config.read_fraction,
            keys,
            n_clients: config.n_servers,
            next_at: Micros::ZERO,
        };
        w.next_at = w.draw_gap();
        w
    }

    fn draw_gap(&mut self) -> Micros {
        match &self.gap {
            Some(exp) => Micros(exp.sample(&mut self.rng).round() as u64),
            None => Micros::MAX,
        }
    }

    /// Time of the next arrival, `Micros::MAX` when the workload is off.
    pub fn peek(&self) -> Micros {
        self.next_at
    }

    pub fn next_arrival(&mut self) -> Option<Arrival> {
        self.gap.as_ref()?;
        let at = self.next_at;
        let kind = if self.rng.random_bool(self.read_fraction) {
            OpKind::Read
        } else {
            OpKind::Write
        };
        let key = match &self.keys {
            Keys::Uniform(n) => self.rng.random_range(0..*n),
            Keys::Zipf(z) => z.sample(&mut self.rng) as u64 - 1,
        };
        let client = self.rng.random_range(0..self.n_clients);
        self.next_at = at.saturating_add(self.draw_gap());
        Some(Arrival {
            at,
            request: OpRequest { kind, key, client },
        })
    }
}

/// All arrivals strictly before `duration`.
pub fn generate_workload(config: &ClusterConfig, duration: Micros) -> Vec<Arrival> {
    let mut w = Workload::new(config);
    let mut out = Vec::new();
    while w.peek() < duration {
        match w.next_arrival() {
            Some(a) => out.push(a),
            None => break,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_count_and_mix() {
        let cfg = ClusterConfig::default();
        let arrivals = generate_workload(&cfg, Micros::from_secs(10));
        let n = arrivals.len() as f64;
        assert!((n - 10_000.0).abs() <= 500.0, "{n}");
        let reads = arrivals.iter().filter(|a| a.request.kind == OpKind::Read).count() as f64;
        let sd = (n * 0.8 * 0.2).sqrt();
        assert!((reads - 0.8 * n).abs() <= 3.0 * sd);
        assert!(arrivals.windows(2).all(|w| w[0].at <= w[1].at));
        assert!(arrivals.iter().all(|a| a.request.key < cfg.n_keys && a.request.client < 9));
    }

    #[test]
    fn same_seed_same_schedule() {
        let cfg = ClusterConfig { seed: 77, ..ClusterConfig::default() };
        assert_eq!(
            generate_workload(&cfg, Micros::from_secs(2)),
            generate_workload(&cfg, Micros::from_secs(2))
        );
        let other = ClusterConfig { seed: 78, ..cfg.clone() };
        assert_ne!(
            generate_workload(&cfg, Micros::from_secs(2)),
            generate_workload(&other, Micros::from_secs(2))
        );
    }

    #[test]
    fn zipfian_keys_skew_to_low_ids() {
        let cfg = ClusterConfig {
            n_keys: 1000,
            key_distribution: KeyDistribution::Zipfian { exponent: 0.99 },
            ..ClusterConfig::default()
        };
        let arrivals = generate_workload(&cfg, Micros::from_secs(5));
        let hot = arrivals.iter().filter(|a| a.request.key < 10).count();
        assert!(hot * 5 > arrivals.len(), "{hot} of {}", arrivals.len());
        assert!(arrivals.iter().all(|a| a.request.key < 1000));
    }

    #[test]
    fn zero_rate_generates_nothing() {
        let cfg = ClusterConfig { throughput_ops_per_s: 0.0, ..ClusterConfig::default() };
        assert!(generate_workload(&cfg, Micros::from_secs(5)).is_empty());
    }
}
