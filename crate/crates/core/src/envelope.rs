//! Soft-partition parameter of a network and the optimal achievable
//! consistency/latency envelope.
//!
//! A client-to-client path goes from client `i` to a coordinator `b`, on to
//! a replica `r ≠ b` and back, then from `b` to client `j`. Clients sit on
//! the same machine as the server with their index, so a hop between
//! co-located endpoints costs nothing.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::delay::DelayModel;
use crate::metrics::MetricReport;
use crate::rng::{self, Stream};
use crate::Micros;

/// Slack on `p_ic + p_ua ≥ α` allowed for sampling noise.
pub const IMPOSSIBILITY_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Star { n_servers: usize },
}

impl Topology {
    pub fn n_servers(&self) -> usize {
        match *self {
            Topology::Star { n_servers } => n_servers,
        }
    }
}

/// Fraction of client-to-client paths whose delay at time `at` exceeds
/// `t_p`. Exact for deterministic link delays, Monte-Carlo over
/// `n_samples` paths for lognormal message delays.
pub fn compute_alpha(
    model: &DelayModel,
    topology: Topology,
    t_p: Micros,
    at: Micros,
    n_samples: usize,
) -> f64 {
    let n = topology.n_servers();
    if n < 2 {
        return 0.0;
    }
    match model.links_at(at, n) {
        Some(links) => exact_alpha(&links, t_p),
        None => sampled_alpha(model, n, t_p, at, n_samples),
    }
}

fn exact_alpha(links: &[Micros], t_p: Micros) -> f64 {
    let n = links.len();
    let hop = |x: usize, y: usize| if x == y { Micros::ZERO } else { links[x] + links[y] };
    let (mut slow, mut total) = (0u64, 0u64);
    for b in 0..n {
        for r in (0..n).filter(|&r| r != b) {
            let replica = hop(b, r) + hop(r, b);
            for i in 0..n {
                for j in 0..n {
                    total += 1;
                    if hop(i, b) + replica + hop(b, j) > t_p {
                        slow += 1;
                    }
                }
            }
        }
    }
    slow as f64 / total as f64
}

fn sampled_alpha(model: &DelayModel, n: usize, t_p: Micros, at: Micros, n_samples: usize) -> f64 {
    let mut pick = rng::stream(model.seed, Stream::MonteCarlo);
    let mut delays = model.sampler_from(rng::shard(model.seed, Stream::MonteCarlo, 1));
    let samples = n_samples.max(1);
    let mut slow = 0usize;
    for _ in 0..samples {
        let i = pick.random_range(0..n);
        let b = pick.random_range(0..n);
        let r = (b + pick.random_range(1..n)) % n;
        let j = pick.random_range(0..n);
        let path = delays.sample(i, b, at)
            + delays.sample(b, r, at)
            + delays.sample(r, b, at)
            + delays.sample(b, j, at);
        if path > t_p {
            slow += 1;
        }
    }
    slow as f64 / samples as f64
}

/// α at every change point of the model.
pub fn alpha_schedule(
    model: &DelayModel,
    topology: Topology,
    t_p: Micros,
    n_samples: usize,
) -> Vec<(Micros, f64)> {
    model
        .change_times()
        .into_iter()
        .map(|at| (at, compute_alpha(model, topology, t_p, at, n_samples)))
        .collect()
}

/// α in force at `at` from a precomputed schedule.
pub fn alpha_at(schedule: &[(Micros, f64)], at: Micros) -> f64 {
    let idx = schedule.partition_point(|(t, _)| *t <= at);
    schedule.get(idx.saturating_sub(1)).map_or(0.0, |(_, a)| *a)
}

pub fn optimal_p_ic(alpha: f64, p_ua: f64) -> f64 {
    (alpha - p_ua).max(0.0)
}

pub fn optimal_p_ua(alpha: f64, p_ic: f64) -> f64 {
    (alpha - p_ic).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Measured point lies inside the unachievable region.
    Violation,
    Consistent,
    /// `t_c + t_a ≥ t_p`, so the bound says nothing.
    NotApplicable,
}

pub fn check_impossibility(
    report: &MetricReport,
    alpha: f64,
    t_c: Micros,
    t_a: Micros,
    t_p: Micros,
    tolerance: f64,
) -> Verdict {
    if t_c + t_a >= t_p {
        Verdict::NotApplicable
    } else if report.p_ic + report.p_ua < alpha - tolerance {
        Verdict::Violation
    } else {
        Verdict::Consistent
    }
}

/// Vertices of `p_ic = max(0, α − p_ua)` over `p_ua ∈ [0, 1]`.
pub fn envelope_polyline(alpha: f64) -> Vec<(f64, f64)> {
    let alpha = alpha.clamp(0.0, 1.0);
    let mut pts = vec![(0.0, alpha)];
    if alpha > 0.0 {
        pts.push((alpha, 0.0));
    }
    if alpha < 1.0 {
        pts.push((1.0, 0.0));
    }
    pts
}

/// `label,p_ua,p_ic_opt` rows, one polyline per `(label, α)`.
pub fn envelope_csv(curves: &[(String, f64)]) -> String {
    let mut out = String::from("label,p_ua,p_ic_opt\n");
    for (label, alpha) in curves {
        for (x, y) in envelope_polyline(*alpha) {
            let _ = writeln!(out, "{label},{x:.6},{y:.6}");
        }
    }
    out
}

/// Euclidean distance from `(p_ua, p_ic)` to the optimal curve.
pub fn distance_to_envelope(p_ua: f64, p_ic: f64, alpha: f64) -> f64 {
    envelope_polyline(alpha)
        .windows(2)
        .map(|seg| segment_distance((p_ua, p_ic), seg[0], seg[1]))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Link delays for the sharp-jump setup: `slow` servers (the first ones)
/// at `slow_delay`, the rest at `base`.
pub fn jump_links(n: usize, slow: usize, base: Micros, slow_delay: Micros) -> Vec<Micros> {
    (0..n).map(|i| if i < slow { slow_delay } else { base }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::{DelayVariant, LinkStep, LognormalStep};
    use proptest::prelude::*;

    fn ms(v: u64) -> Micros {
        Micros::from_ms(v)
    }

    const STAR9: Topology = Topology::Star { n_servers: 9 };

    fn sharp(slow_delay: u64) -> DelayModel {
        DelayModel {
            variant: DelayVariant::SharpJump {
                schedule: vec![
                    LinkStep { at: ms(0), one_way: vec![ms(10); 9] },
                    LinkStep { at: Micros::from_secs(800), one_way: jump_links(9, 5, ms(10), ms(slow_delay)) },
                ],
            },
            seed: 0,
        }
    }

    // Direct count over every (i, b, r, j) with the per-hop rule spelled out.
    fn brute_alpha(links: &[u64], t_p: u64) -> f64 {
        let n = links.len();
        let mut paths = vec![];
        for i in 0..n {
            for b in 0..n {
                for r in 0..n {
                    for j in 0..n {
                        if r == b {
                            continue;
                        }
                        let mut d = 0;
                        for (x, y) in [(i, b), (b, r), (r, b), (b, j)] {
                            if x != y {
                                d += links[x] + links[y];
                            }
                        }
                        paths.push(d);
                    }
                }
            }
        }
        paths.iter().filter(|&&d| d > t_p).count() as f64 / paths.len() as f64
    }

    #[test]
    fn uniform_ten_ms_links_never_partition_at_150() {
        let m = sharp(26);
        assert_eq!(compute_alpha(&m, STAR9, ms(150), ms(0), 0), 0.0);
    }

    #[test]
    fn jump_raises_alpha_to_about_four_tenths() {
        let m = sharp(26);
        let after = compute_alpha(&m, STAR9, ms(150), Micros::from_secs(900), 0);
        let links: Vec<u64> = jump_links(9, 5, ms(10), ms(26)).iter().map(|d| d.as_us()).collect();
        assert_eq!(after, brute_alpha(&links, 150_000));
        assert!((after - 2400.0 / 5832.0).abs() < 1e-12, "{after}");
    }

    #[test]
    fn zero_partition_bound_means_every_path_is_slow() {
        let m = DelayModel::constant(ms(1));
        assert_eq!(compute_alpha(&m, STAR9, Micros::ZERO, ms(0), 0), 1.0);
    }

    #[test]
    fn lognormal_alpha_is_sampled() {
        let m = DelayModel {
            variant: DelayVariant::Lognormal {
                schedule: vec![LognormalStep { at: ms(0), mean: ms(5), sd: ms(2) }],
            },
            seed: 9,
        };
        let a = compute_alpha(&m, STAR9, ms(12), ms(0), 20_000);
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(a, compute_alpha(&m, STAR9, ms(12), ms(0), 20_000));
        assert!(compute_alpha(&m, STAR9, ms(200), ms(0), 20_000) < 1e-3);
    }

    #[test]
    fn optimal_curve_values() {
        assert!((optimal_p_ic(0.42, 0.2375) - 0.1825).abs() < 1e-12);
        assert_eq!(optimal_p_ic(0.0, 0.3), 0.0);
        assert_eq!(optimal_p_ic(0.42, 0.42), 0.0);
        assert!((optimal_p_ua(0.42, 0.1) - 0.32).abs() < 1e-12);
    }

    #[test]
    fn impossibility_verdicts() {
        let rep = |p_ic, p_ua| MetricReport { p_ic, p_ua, n_reads: 100, t_c: ms(0), t_a: ms(100) };
        assert_eq!(check_impossibility(&rep(0.2, 0.25), 0.42, ms(0), ms(100), ms(150), 0.02), Verdict::Consistent);
        assert_eq!(check_impossibility(&rep(0.1, 0.1), 0.42, ms(0), ms(100), ms(150), 0.02), Verdict::Violation);
        assert_eq!(check_impossibility(&rep(0.1, 0.1), 0.42, ms(50), ms(100), ms(150), 0.02), Verdict::NotApplicable);
    }

    #[test]
    fn distance_is_zero_on_curve() {
        assert!(distance_to_envelope(0.2, 0.22, 0.42) < 1e-12);
        assert!(distance_to_envelope(0.6, 0.0, 0.42) < 1e-12);
        assert!((distance_to_envelope(0.0, 0.0, 0.0)).abs() < 1e-12);
        assert!((distance_to_envelope(0.5, 0.5, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn envelope_csv_lists_vertices() {
        let csv = envelope_csv(&[("before".into(), 0.0), ("after".into(), 0.4)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,p_ua,p_ic_opt");
        assert_eq!(lines.len(), 1 + 2 + 3);
    }

    proptest! {
        #[test]
        fn optimal_curve_shape(alpha in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(optimal_p_ic(alpha, lo) >= optimal_p_ic(alpha, hi));
            if lo <= alpha {
                prop_assert!(optimal_p_ic(alpha, lo) + lo >= alpha - 1e-12);
            }
        }

        #[test]
        fn alpha_nonincreasing_in_bound(links in prop::collection::vec(0u64..40, 2..6), a in 0u64..300, b in 0u64..300) {
            let links: Vec<Micros> = links.into_iter().map(Micros::from_ms).collect();
            let n = links.len();
            let m = DelayModel { variant: DelayVariant::SharpJump { schedule: vec![LinkStep { at: ms(0), one_way: links.clone() }] }, seed: 0 };
            let topo = Topology::Star { n_servers: n };
            let (lo, hi) = (a.min(b), a.max(b));
            let al = compute_alpha(&m, topo, ms(lo), ms(0), 0);
            let ah = compute_alpha(&m, topo, ms(hi), ms(0), 0);
            prop_assert!(al >= ah);
            let raw: Vec<u64> = links.iter().map(|d| d.as_us()).collect();
            prop_assert_eq!(al, brute_alpha(&raw, ms(lo).as_us()));
        }

        #[test]
        fn distance_nonnegative(x in 0.0f64..=1.0, y in 0.0f64..=1.0, alpha in 0.0f64..=1.0) {
            prop_assert!(distance_to_envelope(x, y, alpha) >= 0.0);
        }
    }
}
