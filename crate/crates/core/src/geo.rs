//! Multi-data-center layer: composing per-DC miss probabilities, adding the
//! WAN, and steering the geo delay (the wait added at the local DC before a
//! read fans out to the replica DCs).

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::Stepper;
use crate::delay::lognormal;
use crate::model::Sla;
use crate::rng::{self, SimRng, Stream};
use crate::Micros;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("no per-DC models to compose")]
    EmptyModelList,
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("invalid sampler: {0}")]
    Sampler(String),
    #[error("WAN schedule must start at iteration 0 and strictly increase")]
    WanSchedule,
}

/// How per-DC answers combine into one client-visible answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompositionRule {
    /// The first DC to answer suffices.
    Quickest,
    /// Every DC must answer.
    All,
}

impl CompositionRule {
    /// Composed miss probability from independent per-DC miss
    /// probabilities at a common bound.
    pub fn combine(self, misses: &[f64]) -> f64 {
        match self {
            CompositionRule::Quickest => misses.iter().product(),
            CompositionRule::All => 1.0 - misses.iter().map(|p| 1.0 - p).product::<f64>(),
        }
    }
}

/// Result of composing `(t^j, p^j)` point models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Composed {
    /// All bounds equal `t`; the composed miss probability at `t` is `p`.
    Exact { t: Micros, p: f64 },
    /// The composed miss probability at `t_min` is at least `p` and at
    /// `t_max` at most `p`.
    Bounds { t_min: Micros, t_max: Micros, p: f64 },
}

impl Composed {
    pub fn value(&self) -> f64 {
        match *self {
            Composed::Exact { p, .. } | Composed::Bounds { p, .. } => p,
        }
    }
}

fn compose(models: &[(Micros, f64)], rule: CompositionRule) -> Result<Composed, GeoError> {
    let (first, _) = *models.first().ok_or(GeoError::EmptyModelList)?;
    if let Some(&(_, p)) = models.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
        return Err(GeoError::Probability(p));
    }
    let ps: Vec<f64> = models.iter().map(|(_, p)| *p).collect();
    let p = rule.combine(&ps);
    let t_min = models.iter().map(|(t, _)| *t).min().unwrap_or(first);
    let t_max = models.iter().map(|(t, _)| *t).max().unwrap_or(first);
    Ok(if t_min == t_max {
        Composed::Exact { t: t_min, p }
    } else {
        Composed::Bounds { t_min, t_max, p }
    })
}

/// Composes per-DC latency models `(t_a^j, p_ua^j)`.
pub fn compose_latency(models: &[(Micros, f64)], rule: CompositionRule) -> Result<Composed, GeoError> {
    compose(models, rule)
}

/// Composes per-DC consistency models `(t_c^j, p_ic^j)`; freshness and
/// latency compose identically.
pub fn compose_consistency(models: &[(Micros, f64)], rule: CompositionRule) -> Result<Composed, GeoError> {
    compose(models, rule)
}

/// A nonnegative random duration in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    Constant { value: f64 },
    /// Mean and standard deviation of the variate itself.
    Lognormal { mean: f64, sd: f64 },
    /// Clamped below at zero.
    Normal { mean: f64, sd: f64 },
}

impl Sampler {
    pub fn validate(&self) -> Result<(), GeoError> {
        match *self {
            Sampler::Constant { value } if value >= 0.0 && value.is_finite() => Ok(()),
            Sampler::Lognormal { mean, sd } => lognormal(mean, sd).map(|_| ()).map_err(|e| GeoError::Sampler(e.to_string())),
            Sampler::Normal { mean, sd } if mean.is_finite() && sd >= 0.0 && sd.is_finite() => Ok(()),
            other => Err(GeoError::Sampler(format!("{other:?}"))),
        }
    }

    pub fn distribution(&self) -> Result<Dist, GeoError> {
        self.validate()?;
        Ok(match *self {
            Sampler::Constant { value } => Dist::Constant(value),
            Sampler::Lognormal { mean, sd } => {
                Dist::Lognormal(lognormal(mean, sd).map_err(|e| GeoError::Sampler(e.to_string()))?)
            }
            Sampler::Normal { mean, sd } => {
                Dist::Normal(Normal::new(mean, sd).map_err(|e| GeoError::Sampler(e.to_string()))?)
            }
        })
    }
}

/// Ready-to-draw form of a [`Sampler`].
#[derive(Clone, Copy, Debug)]
pub enum Dist {
    Constant(f64),
    Lognormal(rand_distr::LogNormal<f64>),
    Normal(Normal<f64>),
}

impl Dist {
    pub fn draw(&self, rng: &mut SimRng) -> f64 {
        match self {
            Dist::Constant(v) => *v,
            Dist::Lognormal(d) => d.sample(rng),
            Dist::Normal(d) => d.sample(rng).max(0.0),
        }
    }
}

/// Monte-Carlo estimate of a DC-plus-WAN miss probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WanEstimate {
    /// `Pr[X + Y > t + t_p^G]`.
    pub estimate: f64,
    /// `Pr[X > t] · Pr[Y > t_p^G]`, which the estimate can only exceed.
    pub lower_bound: f64,
    pub p_dc: f64,
    pub alpha_wan: f64,
}

/// Adds WAN delay `y` to the per-DC quantity `x`. Times in milliseconds.
pub fn compose_wan(x: &Dist, y: &Dist, t: f64, t_p_wan: f64, n_samples: usize, rng: &mut SimRng) -> WanEstimate {
    let n = n_samples.max(1);
    let (mut both, mut dc, mut wan) = (0usize, 0usize, 0usize);
    for _ in 0..n {
        let (a, b) = (x.draw(rng), y.draw(rng));
        if a + b > t + t_p_wan {
            both += 1;
        }
        if a > t {
            dc += 1;
        }
        if b > t_p_wan {
            wan += 1;
        }
    }
    let (p_dc, alpha_wan) = (dc as f64 / n as f64, wan as f64 / n as f64);
    WanEstimate {
        estimate: both as f64 / n as f64,
        lower_bound: p_dc * alpha_wan,
        p_dc,
        alpha_wan,
    }
}

/// WAN delay parameters from `iter` onwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WanStep {
    pub iter: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WanModel {
    pub schedule: Vec<WanStep>,
    /// WAN partition bound `t_p^G` in ms.
    pub t_p: f64,
}

impl WanModel {
    pub fn validate(&self) -> Result<(), GeoError> {
        if self.schedule.first().is_none_or(|s| s.iter != 0)
            || self.schedule.windows(2).any(|w| w[1].iter <= w[0].iter)
        {
            return Err(GeoError::WanSchedule);
        }
        for s in &self.schedule {
            Sampler::Normal { mean: s.mean, sd: s.sd }.validate()?;
        }
        Ok(())
    }

    pub fn at(&self, iter: usize) -> WanStep {
        let idx = self.schedule.partition_point(|s| s.iter <= iter);
        self.schedule[idx.saturating_sub(1)]
    }
}

/// Per-DC read and write behaviour: a read is two legs `R + S`, a write
/// reaches the replica after `W`. The freshness gap is `max(0, W − R − S)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcModel {
    pub read_leg: Sampler,
    pub write: Sampler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub k_p: f64,
    pub k_d: f64,
    pub k_i: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidState {
    pub gains: PidGains,
    pub integral: f64,
    pub prev_error: f64,
}

impl PidState {
    pub fn new(gains: PidGains) -> Self {
        PidState { gains, integral: 0.0, prev_error: 0.0 }
    }

    /// Control output for this error.
    pub fn update(&mut self, error: f64) -> f64 {
        self.integral += error;
        let derivative = error - self.prev_error;
        self.prev_error = error;
        self.gains.k_p * error + self.gains.k_d * derivative + self.gains.k_i * self.integral
    }
}

/// Composed metrics for one geo delay.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoEstimate {
    pub p_ic: f64,
    pub p_ua: f64,
    pub per_dc_ic: Vec<f64>,
    pub per_dc_ua: Vec<f64>,
}

/// Estimates the composed metrics for geo delay `delta` (ms). Per DC `i`:
/// `p_ic^i = Pr[F + Y > t_c + t_p^G + Δ]`, `p_ua^i = Pr[L + Y > t_a + t_p^G − Δ]`.
#[allow(clippy::too_many_arguments)]
pub fn estimate(
    dcs: &[DcModel],
    wan: WanStep,
    t_p_wan: f64,
    sla: &Sla,
    rule: CompositionRule,
    delta: f64,
    n_samples: usize,
    rng: &mut SimRng,
) -> Result<GeoEstimate, GeoError> {
    if dcs.is_empty() {
        return Err(GeoError::EmptyModelList);
    }
    let y = Sampler::Normal { mean: wan.mean, sd: wan.sd }.distribution()?;
    let t_c = sla.t_c().as_ms_f64() + t_p_wan + delta;
    let t_a = sla.t_a().as_ms_f64() + t_p_wan - delta;
    let n = n_samples.max(1);
    let mut ic = Vec::with_capacity(dcs.len());
    let mut ua = Vec::with_capacity(dcs.len());
    for dc in dcs {
        let (leg, write) = (dc.read_leg.distribution()?, dc.write.distribution()?);
        let (mut stale, mut late) = (0usize, 0usize);
        for _ in 0..n {
            let l = leg.draw(rng) + leg.draw(rng);
            let w = write.draw(rng);
            let wan_delay = y.draw(rng);
            if (w - l).max(0.0) + wan_delay > t_c {
                stale += 1;
            }
            if l + wan_delay > t_a {
                late += 1;
            }
        }
        ic.push(stale as f64 / n as f64);
        ua.push(late as f64 / n as f64);
    }
    Ok(GeoEstimate {
        p_ic: rule.combine(&ic),
        p_ua: rule.combine(&ua),
        per_dc_ic: ic,
        per_dc_ua: ua,
    })
}

/// How the geo delay is steered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeoController {
    /// `Δ` moves by `scale · u` ms per iteration, `u` the PID output.
    Pid { gains: PidGains, scale: f64 },
    /// Doubling steps of `unit` ms, capped at `max_inc` units.
    Multiplicative { unit: f64, max_inc: u32 },
}

/// Sign of a `Δ` move that makes the SLA metric smaller.
fn improving_sign(sla: &Sla) -> f64 {
    match sla {
        Sla::Consistency(_) => 1.0,
        Sla::Latency(_) => -1.0,
    }
}

/// PID update of the geo delay from the measured composed metrics.
pub fn geo_control_iteration(pid: &mut PidState, sla: &Sla, scale: f64, est: &GeoEstimate, delta: f64) -> f64 {
    let error = sla.sla_metric(est.p_ic, est.p_ua) - sla.bound();
    let u = pid.update(error);
    (delta + improving_sign(sla) * scale * u).max(0.0)
}

/// Multiplicative update of the geo delay.
pub fn geo_control_multiplicative(stepper: &mut Stepper, sla: &Sla, unit: f64, est: &GeoEstimate, delta: f64) -> f64 {
    let dir = if sla.sla_metric(est.p_ic, est.p_ua) > sla.bound() { 1 } else { -1 };
    let units = stepper.step(dir) as f64;
    (delta + improving_sign(sla) * unit * units).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoRow {
    pub iter: usize,
    pub p_ic: f64,
    pub p_ua: f64,
    pub delta_ms: f64,
    pub wan_mean_ms: f64,
}

pub const GEO_HEADER: &str = "iter,p_ic_composed,p_ua_composed,delta_us,wan_mean_us";

pub fn geo_csv(rows: &[GeoRow]) -> String {
    let mut out = String::from(GEO_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.iter,
            r.p_ic,
            r.p_ua,
            Micros::from_ms_f64(r.delta_ms).as_us(),
            Micros::from_ms_f64(r.wan_mean_ms).as_us()
        );
    }
    out
}

/// Everything a geo run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoConfig {
    pub n_remote: usize,
    pub dc: DcModel,
    pub wan: WanModel,
    pub rule: CompositionRule,
    pub controller: GeoController,
    pub iterations: usize,
    pub n_samples: usize,
}

impl GeoConfig {
    pub fn validate(&self) -> Result<(), GeoError> {
        if self.n_remote == 0 {
            return Err(GeoError::EmptyModelList);
        }
        self.dc.read_leg.validate()?;
        self.dc.write.validate()?;
        self.wan.validate()
    }
}

/// Runs the geo loop from `Δ = 0` and returns one row per iteration, with
/// the metrics measured at the `Δ` in force during that iteration.
pub fn run_geo(config: &GeoConfig, sla: &Sla, seed: u64) -> Result<Vec<GeoRow>, GeoError> {
    config.validate()?;
    let dcs = vec![config.dc; config.n_remote];
    let mut delta = 0.0;
    let mut pid = match config.controller {
        GeoController::Pid { gains, .. } => Some(PidState::new(gains)),
        GeoController::Multiplicative { .. } => None,
    };
    let mut stepper = match config.controller {
        GeoController::Multiplicative { max_inc, .. } => Stepper::new(max_inc),
        GeoController::Pid { .. } => Stepper::new(1),
    };
    let mut rows = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let wan = config.wan.at(iter);
        let mut rng: SimRng = rng::shard(seed, Stream::MonteCarlo, iter as u64);
        let est = estimate(&dcs, wan, config.wan.t_p, sla, config.rule, delta, config.n_samples, &mut rng)?;
        rows.push(GeoRow { iter, p_ic: est.p_ic, p_ua: est.p_ua, delta_ms: delta, wan_mean_ms: wan.mean });
        delta = match (config.controller, pid.as_mut()) {
            (GeoController::Pid { scale, .. }, Some(pid)) => geo_control_iteration(pid, sla, scale, &est, delta),
            (GeoController::Multiplicative { unit, .. }, _) => {
                geo_control_multiplicative(&mut stepper, sla, unit, &est, delta)
            }
            _ => delta,
        };
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConsistencySla, LatencySla};
    use proptest::prelude::*;

    fn ms(v: u64) -> Micros {
        Micros::from_ms(v)
    }

    #[test]
    fn closed_forms() {
        let m = [(ms(10), 0.1); 3];
        assert!((compose_latency(&m, CompositionRule::Quickest).unwrap().value() - 0.001).abs() < 1e-12);
        assert!((compose_latency(&m, CompositionRule::All).unwrap().value() - 0.271).abs() < 1e-12);
        let c = [(ms(1), 0.2), (ms(1), 0.3)];
        assert!((compose_consistency(&c, CompositionRule::Quickest).unwrap().value() - 0.06).abs() < 1e-12);
        assert!((compose_consistency(&c, CompositionRule::All).unwrap().value() - 0.44).abs() < 1e-12);
        assert!(matches!(compose_consistency(&c, CompositionRule::All).unwrap(), Composed::Exact { .. }));
    }

    #[test]
    fn heterogeneous_bounds_bracket() {
        let m = [(ms(5), 0.3), (ms(9), 0.2)];
        match compose_latency(&m, CompositionRule::Quickest).unwrap() {
            Composed::Bounds { t_min, t_max, p } => {
                assert_eq!((t_min, t_max), (ms(5), ms(9)));
                assert!((p - 0.06).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_list_rejected() {
        assert_eq!(compose_latency(&[], CompositionRule::All), Err(GeoError::EmptyModelList));
    }

    #[test]
    fn degenerate_wan_reduces_to_dc_tail() {
        let mut rng = rng::stream(4, Stream::MonteCarlo);
        let x = Sampler::Lognormal { mean: 10.0, sd: 4.0 }.distribution().unwrap();
        let y = Dist::Constant(0.0);
        let est = compose_wan(&x, &y, 12.0, 0.0, 50_000, &mut rng);
        assert_eq!(est.estimate, est.p_dc);
    }

    #[test]
    fn zero_error_keeps_delta() {
        let sla = Sla::Latency(LatencySla { p_ua_sla: 0.27, t_a: ms(25), t_c: Micros(100), epsilon: 0.0 });
        let mut pid = PidState::new(PidGains { k_p: 1.0, k_d: 0.5, k_i: 0.5 });
        let est = GeoEstimate { p_ic: 0.0, p_ua: 0.27, per_dc_ic: vec![], per_dc_ua: vec![] };
        let mut d = 4.0;
        for _ in 0..20 {
            d = geo_control_iteration(&mut pid, &sla, 7.0, &est, d);
        }
        assert_eq!(d, 4.0);
    }

    #[test]
    fn delta_never_negative() {
        let sla = Sla::Latency(LatencySla { p_ua_sla: 0.1, t_a: ms(25), t_c: Micros(100), epsilon: 0.0 });
        let mut pid = PidState::new(PidGains { k_p: 1.0, k_d: 0.5, k_i: 0.5 });
        let est = GeoEstimate { p_ic: 0.0, p_ua: 0.9, per_dc_ic: vec![], per_dc_ua: vec![] };
        assert_eq!(geo_control_iteration(&mut pid, &sla, 7.0, &est, 1.0), 0.0);
        let mut st = Stepper::new(8);
        assert_eq!(geo_control_multiplicative(&mut st, &sla, 1.0, &est, 0.0), 0.0);
    }

    #[test]
    fn delta_trades_consistency_for_latency() {
        let dcs = [DcModel {
            read_leg: Sampler::Lognormal { mean: 7.5, sd: 2.5 },
            write: Sampler::Lognormal { mean: 12.0, sd: 9.0 },
        }; 3];
        let wan = WanStep { iter: 0, mean: 20.0, sd: 2f64.sqrt() };
        let sla = Sla::Consistency(ConsistencySla { p_ic_sla: 0.38, t_c: ms(1), t_a: ms(25), epsilon: 0.0 });
        let mut prev: Option<GeoEstimate> = None;
        for d in [0.0, 2.0, 4.0, 8.0] {
            let mut rng = rng::stream(8, Stream::MonteCarlo);
            let e = estimate(&dcs, wan, 20.0, &sla, CompositionRule::All, d, 20_000, &mut rng).unwrap();
            if let Some(p) = &prev {
                assert!(e.p_ic <= p.p_ic);
                assert!(e.p_ua >= p.p_ua);
            }
            prev = Some(e);
        }
    }

    #[test]
    fn geo_csv_uses_microseconds() {
        let rows = [GeoRow { iter: 0, p_ic: 0.5, p_ua: 0.25, delta_ms: 3.2, wan_mean_ms: 20.0 }];
        assert_eq!(geo_csv(&rows).lines().nth(1).unwrap(), "0,0.500000,0.250000,3200,20000");
    }

    proptest! {
        #[test]
        fn all_is_never_below_quickest(ps in prop::collection::vec(0.0f64..=1.0, 1..6)) {
            let q = CompositionRule::Quickest.combine(&ps);
            let a = CompositionRule::All.combine(&ps);
            prop_assert!(a >= q - 1e-12);
        }

        #[test]
        fn consistency_and_latency_compose_alike(models in prop::collection::vec((0u64..50_000, 0.0f64..=1.0), 1..5)) {
            let m: Vec<(Micros, f64)> = models.into_iter().map(|(t, p)| (Micros(t), p)).collect();
            for rule in [CompositionRule::Quickest, CompositionRule::All] {
                prop_assert_eq!(compose_latency(&m, rule), compose_consistency(&m, rule));
            }
        }

        #[test]
        fn pid_output_is_linear_in_zero_history(e in -1.0f64..1.0) {
            let g = PidGains { k_p: 1.0, k_d: 0.5, k_i: 0.5 };
            let mut pid = PidState::new(g);
            prop_assert!((pid.update(e) - 2.0 * e).abs() < 1e-12);
        }
    }
}
