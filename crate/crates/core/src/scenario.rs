//! Reproducible experiments described in TOML.
//!
//! A scenario is one of three kinds, picked by which sections it has:
//!
//! * `[geo]`: the multi-DC geo-delay loop;
//! * `[cluster]` and `[controller]`: the store under the SLA control loop;
//! * `[cluster]` only: the store with a fixed knob schedule, measured in
//!   fixed-length windows of workload operations.
//!
//! Durations are given in milliseconds unless the field name ends in `_s`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::controller::{timeline_csv, Controller, ControllerConfig, ControllerError, TimelineRow};
use crate::envelope::{self, alpha_at, alpha_schedule, Topology};
use crate::geo::{self, GeoConfig, GeoError, GeoRow};
use crate::metrics::{compute_metrics_with, compute_t_visibility, MetricsError, WriteIndex};
use crate::model::{KnobState, OpRecord, Sla, SlaError};
use crate::sim::{ClusterConfig, SimError, Simulation};
use crate::Micros;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sla(#[from] SlaError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("unknown bundled scenario {0:?}")]
    UnknownBundled(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Knob values from `at` onwards (fixed-knob scenarios).
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobStep {
    pub at: Micros,
    #[serde(flatten)]
    pub knobs: KnobState,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureStep {
    pub at: Micros,
    pub server: usize,
    pub failed: bool,
}

fn d_window_s() -> f64 {
    10.0
}
fn d_alpha_samples() -> usize {
    20_000
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub sla: Sla,
    #[serde(default)]
    pub cluster: Option<ClusterConfig>,
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
    #[serde(default)]
    pub geo: Option<GeoConfig>,
    /// Simulated run length for single-DC scenarios.
    #[serde(default)]
    pub duration_s: f64,
    /// Measurement window for fixed-knob scenarios.
    #[serde(default = "d_window_s")]
    pub window_s: f64,
    /// Knob settings by time. Under a controller these are starting
    /// points that the loop then moves.
    #[serde(default)]
    pub knobs: Vec<KnobStep>,
    #[serde(default)]
    pub failures: Vec<FailureStep>,
    /// Partition bound for α; defaults to `t_c + t_a`.
    #[serde(default)]
    pub t_p: Option<Micros>,
    #[serde(default = "d_alpha_samples")]
    pub alpha_samples: usize,
    /// Freshness bounds at which to compare t-freshness and t-visibility.
    #[serde(default)]
    pub pbs_t: Vec<Micros>,
    /// Re-run with each of these deadlines (and `t_p = t_c + t_a`).
    #[serde(default)]
    pub sweep_t_a: Vec<Micros>,
    /// Iterations of a segment treated as steady state when measuring the
    /// geo-delay oscillation.
    #[serde(default)]
    pub steady_iterations: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Geo,
    Controlled,
    Fixed,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn mode(&self) -> Mode {
        if self.geo.is_some() {
            Mode::Geo
        } else if self.controller.is_some() {
            Mode::Controlled
        } else {
            Mode::Fixed
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.sla.validate()?;
        match (&self.geo, &self.cluster) {
            (Some(g), None) => g.validate()?,
            (None, Some(c)) => {
                c.validate().map_err(SimError::from)?;
                if !(self.duration_s > 0.0) {
                    return Err(ScenarioError::Invalid("duration_s must be positive".into()));
                }
                if !(self.window_s > 0.0) {
                    return Err(ScenarioError::Invalid("window_s must be positive".into()));
                }
                if self.knobs.windows(2).any(|w| w[1].at <= w[0].at) {
                    return Err(ScenarioError::Invalid("knob schedule must strictly increase".into()));
                }
                for k in &self.knobs {
                    k.knobs.validate(c.max_read_delay).map_err(SimError::from)?;
                }
                if let Some(f) = self.failures.iter().find(|f| f.server >= c.n_servers) {
                    return Err(SimError::NoSuchServer(f.server).into());
                }
            }
            (Some(_), Some(_)) => return Err(ScenarioError::Invalid("give either [geo] or [cluster], not both".into())),
            (None, None) => return Err(ScenarioError::Invalid("missing [geo] or [cluster] section".into())),
        }
        if self.geo.is_some() && self.controller.is_some() {
            return Err(ScenarioError::Invalid("[controller] applies to single-DC scenarios only".into()));
        }
        Ok(())
    }

    pub fn t_p(&self) -> Micros {
        self.t_p.unwrap_or(self.sla.t_c() + self.sla.t_a())
    }

    fn with_t_a(&self, t_a: Micros) -> Scenario {
        let mut s = self.clone();
        match &mut s.sla {
            Sla::Consistency(c) => c.t_a = t_a,
            Sla::Latency(l) => l.t_a = t_a,
        }
        s.t_p = None;
        s.sweep_t_a.clear();
        s
    }
}

/// Per-segment outcome. A segment starts at time zero and at every change
/// of the network model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentSummary {
    pub segment: usize,
    /// Seconds for single-DC runs, iterations for geo runs.
    pub start: f64,
    pub alpha: f64,
    /// Row index where the SLA metric settled.
    pub converged_row: Option<usize>,
    /// Time (s) or iterations from segment start to convergence.
    pub convergence: Option<f64>,
    pub satisfaction: Option<f64>,
    pub distance_to_envelope: f64,
    /// Peak-to-peak geo delay (ms) over the steady part of the segment.
    pub delta_amplitude: Option<f64>,
    pub rows: usize,
}

pub const SUMMARY_HEADER: &str =
    "variant,segment,start,alpha,converged_row,convergence,satisfaction,distance_to_envelope,delta_amplitude_ms,rows";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn summary_csv(rows: &[(String, SegmentSummary)]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (variant, s) in rows {
        let _ = writeln!(
            out,
            "{variant},{},{:.3},{:.6},{},{},{},{:.6},{},{}",
            s.segment,
            s.start,
            s.alpha,
            s.converged_row.map_or_else(String::new, |r| r.to_string()),
            opt(s.convergence),
            opt(s.satisfaction),
            s.distance_to_envelope,
            opt(s.delta_amplitude),
            s.rows
        );
    }
    out
}

/// First index `≥ from` at which `run` consecutive values lie in `[lo, hi]`.
pub fn convergence_index(values: &[f64], from: usize, to: usize, lo: f64, hi: f64, run: usize) -> Option<usize> {
    let to = to.min(values.len());
    let mut streak = 0;
    for (i, &v) in values.iter().enumerate().take(to).skip(from) {
        if (lo..=hi).contains(&v) {
            streak += 1;
            if streak >= run {
                return Some(i + 1 - run);
            }
        } else {
            streak = 0;
        }
    }
    None
}

pub const CONVERGENCE_RUN: usize = 10;
pub const GEO_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, Default)]
pub struct ScenarioOutput {
    /// File name to contents.
    pub files: BTreeMap<String, String>,
    pub summary: Vec<(String, SegmentSummary)>,
    pub timeline: Vec<TimelineRow>,
    pub geo: Vec<GeoRow>,
}

impl ScenarioOutput {
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        for (name, body) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, body)?;
        }
        Ok(())
    }

    /// Summary of the base run only.
    pub fn segments(&self) -> Vec<SegmentSummary> {
        self.summary.iter().filter(|(v, _)| v == "base").map(|(_, s)| *s).collect()
    }
}

/// Runs a scenario. `seed` overrides the scenario's own seed.
pub fn run_scenario(scenario: &Scenario, seed: Option<u64>) -> Result<ScenarioOutput, ScenarioError> {
    scenario.validate()?;
    let seed = seed.unwrap_or(scenario.seed);
    let mut out = run_variant(scenario, seed, "base")?;
    for &t_a in &scenario.sweep_t_a {
        let label = format!("t_a={}ms", t_a.as_ms_f64());
        let v = run_variant(&scenario.with_t_a(t_a), seed, &label)?;
        for (name, body) in v.files {
            if name != "summary.csv" {
                out.files.insert(format!("{label}/{name}"), body);
            }
        }
        out.summary.extend(v.summary);
    }
    out.files.insert("summary.csv".into(), summary_csv(&out.summary));
    Ok(out)
}

fn run_variant(s: &Scenario, seed: u64, label: &str) -> Result<ScenarioOutput, ScenarioError> {
    let mut out = match s.mode() {
        Mode::Geo => run_geo_mode(s, seed)?,
        Mode::Controlled | Mode::Fixed => run_single_dc(s, seed)?,
    };
    out.summary = out.summary.into_iter().map(|(_, seg)| (label.to_string(), seg)).collect();
    out.files.insert("summary.csv".into(), summary_csv(&out.summary));
    Ok(out)
}

fn run_geo_mode(s: &Scenario, seed: u64) -> Result<ScenarioOutput, ScenarioError> {
    let cfg = s.geo.as_ref().ok_or_else(|| ScenarioError::Invalid("missing [geo]".into()))?;
    let rows = geo::run_geo(cfg, &s.sla, seed)?;
    let bound = s.sla.bound();
    let metric: Vec<f64> = rows.iter().map(|r| s.sla.sla_metric(r.p_ic, r.p_ua)).collect();
    let starts: Vec<usize> = cfg.wan.schedule.iter().map(|w| w.iter).collect();
    let mut summary = Vec::new();
    let mut scatter = String::from("segment,p_ua,p_ic\n");
    for (seg, &start) in starts.iter().enumerate() {
        let end = starts.get(seg + 1).copied().unwrap_or(rows.len()).min(rows.len());
        if start >= end {
            continue;
        }
        let conv = convergence_index(&metric, start, end, bound - GEO_TOLERANCE, bound + GEO_TOLERANCE, CONVERGENCE_RUN);
        let steady = s.steady_iterations.unwrap_or((end - start) / 2).min(end - start);
        let deltas: Vec<f64> = rows[end - steady..end].iter().map(|r| r.delta_ms).collect();
        let amplitude = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - deltas.iter().cloned().fold(f64::INFINITY, f64::min);
        let from = conv.unwrap_or(end - steady);
        let sat = conv.map(|c| {
            let ok = metric[c..end].iter().filter(|&&m| m <= bound).count();
            ok as f64 / (end - c) as f64
        });
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in &rows[from..end] {
            let _ = writeln!(scatter, "{seg},{:.6},{:.6}", r.p_ua, r.p_ic);
            cx += r.p_ua;
            cy += r.p_ic;
        }
        let n = (end - from).max(1) as f64;
        summary.push((
            String::new(),
            SegmentSummary {
                segment: seg,
                start: start as f64,
                alpha: 0.0,
                converged_row: conv,
                convergence: conv.map(|c| (c - start) as f64),
                satisfaction: sat,
                distance_to_envelope: envelope::distance_to_envelope(cx / n, cy / n, 0.0),
                delta_amplitude: (!deltas.is_empty()).then_some(amplitude),
                rows: end - start,
            },
        ));
    }
    let mut files = BTreeMap::new();
    files.insert("timeline.csv".into(), geo::geo_csv(&rows));
    files.insert("scatter.csv".into(), scatter);
    files.insert("envelope.csv".into(), envelope::envelope_csv(&[("all".into(), 0.0)]));
    Ok(ScenarioOutput { files, summary, timeline: Vec::new(), geo: rows })
}

fn secs(s: f64) -> Micros {
    Micros::from_ms_f64(s * 1000.0)
}

fn run_single_dc(s: &Scenario, seed: u64) -> Result<ScenarioOutput, ScenarioError> {
    let mut cluster = s.cluster.clone().ok_or_else(|| ScenarioError::Invalid("missing [cluster]".into()))?;
    cluster.seed = seed;
    cluster.delay.seed = seed;
    let topology = Topology::Star { n_servers: cluster.n_servers };
    let alphas = alpha_schedule(&cluster.delay, topology, s.t_p(), s.alpha_samples);
    let duration = secs(s.duration_s);
    let mut files = BTreeMap::new();

    let rows = match &s.controller {
        Some(ctl) => {
            let mut sim = Simulation::new(cluster.clone())?;
            let mut controller = Controller::new(*ctl, s.sla, seed);
            let mut rows = Vec::new();
            let alpha_fn = |t: Micros| alpha_at(&alphas, t);
            for (at, ev) in scripted_events(s) {
                if at > Micros::ZERO {
                    rows.extend(controller.run(&mut sim, at.min(duration), &alpha_fn)?);
                }
                match ev {
                    Ok(k) => sim.set_knobs(k)?,
                    Err(f) => sim.set_failed(f.server, f.failed)?,
                }
            }
            rows.extend(controller.run(&mut sim, duration, &alpha_fn)?);
            rows
        }
        None => {
            let (rows, log) = run_fixed(s, cluster.clone(), duration, &alphas)?;
            if !s.pbs_t.is_empty() {
                files.insert("pbs.csv".into(), pbs_csv(&log, &s.pbs_t)?);
            }
            rows
        }
    };

    let bound = s.sla.bound();
    let lo = s.sla.target() - 2.0 * s.sla.epsilon();
    let metric: Vec<f64> = rows.iter().map(|r| s.sla.sla_metric(r.p_ic, r.p_ua)).collect();
    let changes = cluster.delay.change_times();
    let mut summary = Vec::new();
    let mut scatter = String::from("segment,p_ua,p_ic\n");
    let mut curves = Vec::new();
    for (seg, &start) in changes.iter().enumerate() {
        let end_t = changes.get(seg + 1).copied().unwrap_or(Micros::MAX);
        let first = rows.partition_point(|r| r.sim_time <= start);
        let end = rows.partition_point(|r| r.sim_time <= end_t);
        let alpha = alpha_at(&alphas, start);
        curves.push((format!("segment{seg}"), alpha));
        if first >= end {
            continue;
        }
        let conv = if s.controller.is_some() {
            convergence_index(&metric, first, end, lo, bound, CONVERGENCE_RUN)
        } else {
            None
        };
        let sat = conv.map(|c| metric[c..end].iter().filter(|&&m| m <= bound).count() as f64 / (end - c) as f64);
        let from = conv.unwrap_or(first + (end - first) / 2);
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in &rows[from..end] {
            let _ = writeln!(scatter, "{seg},{:.6},{:.6}", r.p_ua, r.p_ic);
            cx += r.p_ua;
            cy += r.p_ic;
        }
        let n = (end - from).max(1) as f64;
        summary.push((
            String::new(),
            SegmentSummary {
                segment: seg,
                start: start.as_secs_f64(),
                alpha,
                converged_row: conv,
                convergence: conv.map(|c| rows[c].sim_time.saturating_sub(start).as_secs_f64()),
                satisfaction: sat,
                distance_to_envelope: envelope::distance_to_envelope(cx / n, cy / n, alpha),
                delta_amplitude: None,
                rows: end - first,
            },
        ));
    }
    files.insert("timeline.csv".into(), timeline_csv(&rows));
    files.insert("scatter.csv".into(), scatter);
    files.insert("envelope.csv".into(), envelope::envelope_csv(&curves));
    Ok(ScenarioOutput { files, summary, timeline: rows, geo: Vec::new() })
}

/// Knob changes and failure toggles in time order; knob changes first at
/// equal times.
fn scripted_events(s: &Scenario) -> Vec<(Micros, Result<KnobState, FailureStep>)> {
    let mut events: Vec<_> = s
        .knobs
        .iter()
        .map(|k| (k.at, Ok(k.knobs)))
        .chain(s.failures.iter().map(|f| (f.at, Err(*f))))
        .collect();
    events.sort_by_key(|(at, ev)| (*at, ev.is_err()));
    events
}

/// Runs with scheduled knobs and measures workload operations in windows
/// of `window_s` by start time. Returns the rows and the complete log.
pub fn run_fixed(
    s: &Scenario,
    cluster: ClusterConfig,
    duration: Micros,
    alphas: &[(Micros, f64)],
) -> Result<(Vec<TimelineRow>, Vec<OpRecord>), ScenarioError> {
    let mut sim = Simulation::new(cluster)?;
    let mut knob_times: Vec<(Micros, KnobState)> = vec![(Micros::ZERO, sim.knobs())];
    for (at, ev) in scripted_events(s) {
        sim.run_until(at.min(duration));
        match ev {
            Ok(k) => {
                sim.set_knobs(k)?;
                knob_times.push((at, k));
            }
            Err(f) => sim.set_failed(f.server, f.failed)?,
        }
    }
    sim.run_until(duration);
    let log = sim.finish().log;
    let index = WriteIndex::build(&log);
    let window = secs(s.window_s);
    let mut by_start: Vec<&OpRecord> = log.iter().filter(|o| o.is_read()).collect();
    by_start.sort_by_key(|o| (o.start, o.op_id));
    let mut rows = Vec::new();
    let mut lo = 0;
    let mut t = Micros::ZERO;
    let mut iter = 0;
    while t < duration {
        let end = (t + window).min(duration);
        let hi = lo + by_start[lo..].partition_point(|o| o.start < end);
        if hi > lo {
            let rep = compute_metrics_with(by_start[lo..hi].iter().copied(), &index, s.sla.t_c(), s.sla.t_a())?;
            let k = knob_times[knob_times.partition_point(|(at, _)| *at <= t).saturating_sub(1)].1;
            let alpha = alpha_at(alphas, t);
            let p_opt = match s.sla {
                Sla::Consistency(_) => envelope::optimal_p_ua(alpha, rep.p_ic),
                Sla::Latency(_) => envelope::optimal_p_ic(alpha, rep.p_ua),
            };
            rows.push(TimelineRow {
                iter,
                sim_time: end,
                p_ic: rep.p_ic,
                p_ua: rep.p_ua,
                read_delay: k.read_delay,
                repair_rate: k.repair_rate,
                alpha,
                p_opt,
            });
            iter += 1;
        }
        lo = hi;
        t = end;
    }
    Ok((rows, log))
}

fn pbs_csv(log: &[OpRecord], ts: &[Micros]) -> Result<String, ScenarioError> {
    let index = WriteIndex::build(log);
    let mut out = String::from("t_ms,p_ic_freshness,p_ic_visibility\n");
    for &t in ts {
        let fresh = compute_metrics_with(log, &index, t, Micros::MAX)?.p_ic;
        let vis = compute_t_visibility(log, t)?;
        let _ = writeln!(out, "{},{:.6},{:.6}", t.as_ms_f64(), fresh, vis);
    }
    Ok(out)
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        /// Scenario files shipped with the crate, by name.
        pub const BUNDLED: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../../scenarios/", $name, ".toml")))),*
        ];
    };
}

bundled!(
    "cass-latency-jump",
    "riak-latency-jump",
    "cass-consistency-jump",
    "cass-consistency-lognormal",
    "riak-consistency-lognormal",
    "cass-consistency-passive",
    "cass-consistency-stringent",
    "repair-rate-only",
    "scaling-32",
    "timeliness-sweep",
    "freshness-vs-visibility",
    "micro-knobs",
    "alpha-bound-sweep",
    "geo-latency-all",
    "geo-consistency-all",
    "geo-latency-quickest",
    "geo-latency-multiplicative",
);

pub fn bundled(name: &str) -> Result<Scenario, ScenarioError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| ScenarioError::UnknownBundled(name.to_string()))?;
    Scenario::from_toml(text)
}
