//! Multiplicative SLA control loop for the single-data-center store.
//!
//! Each iteration measures a window of operations, compares the SLA metric
//! with `bound − ε` and moves the active knob. Consecutive moves in the same
//! direction double the step up to a cap; a direction change resets it to
//! one unit, so the knob settles into a unit-step oscillation.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope;
use crate::metrics::{compute_metrics_with, MetricReport, MetricsError, WriteIndex};
use crate::model::{KnobState, OpKind, OpRecord, Sla};
use crate::rng::{self, SimRng, Stream};
use crate::sim::{OpRequest, Origin, SimError, Simulation};
use crate::Micros;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("measurement window did not complete within {0}")]
    Timeout(Micros),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    ReadDelay,
    RepairRate,
}

/// Doubling step with a cap; shared by every multiplicative loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stepper {
    pub inc: u32,
    /// `0` before the first move, then `+1` or `−1`.
    pub dir: i8,
    pub max_inc: u32,
}

impl Stepper {
    pub fn new(max_inc: u32) -> Self {
        Stepper { inc: 1, dir: 0, max_inc: max_inc.max(1) }
    }

    /// Registers the wanted direction and returns the signed step in units.
    pub fn step(&mut self, new_dir: i8) -> i64 {
        if new_dir == self.dir {
            self.inc = (self.inc * 2).min(self.max_inc);
        } else {
            self.inc = 1;
            self.dir = new_dir;
        }
        self.inc as i64 * self.dir as i64
    }
}

fn d_window() -> usize {
    100
}
fn d_repair_window() -> usize {
    3000
}
fn d_max_inc() -> u32 {
    8
}
fn d_rd_unit() -> Micros {
    Micros::from_ms(1)
}
fn d_repair_unit() -> f64 {
    0.05
}
fn d_probe_rate() -> f64 {
    200.0
}
fn d_probe_keys() -> u64 {
    1
}
fn d_probe_reads() -> f64 {
    0.8
}
fn d_timeout() -> Micros {
    Micros::from_secs(30)
}
fn d_passive_ops() -> usize {
    100
}
fn d_passive_servers() -> usize {
    5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Measurement {
    /// Issue dedicated probe operations on their own keys.
    Active {
        #[serde(default = "d_probe_rate")]
        probe_rate: f64,
        #[serde(default = "d_probe_keys")]
        n_probe_keys: u64,
        #[serde(default = "d_probe_reads")]
        read_fraction: f64,
        #[serde(default = "d_timeout")]
        timeout: Micros,
    },
    /// Sample the latest workload operations seen by a few servers.
    Passive {
        #[serde(default = "d_passive_ops")]
        n_ops: usize,
        #[serde(default = "d_passive_servers")]
        n_servers: usize,
    },
}

impl Default for Measurement {
    fn default() -> Self {
        Measurement::Active {
            probe_rate: d_probe_rate(),
            n_probe_keys: d_probe_keys(),
            read_fraction: d_probe_reads(),
            timeout: d_timeout(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Operations per window while read delay is the active knob.
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default = "d_repair_window")]
    pub repair_window: usize,
    #[serde(default = "d_max_inc")]
    pub max_inc: u32,
    #[serde(default = "d_rd_unit")]
    pub read_delay_unit: Micros,
    #[serde(default = "d_repair_unit")]
    pub repair_unit: f64,
    /// Fall back to the repair rate when read delay is already zero.
    #[serde(default)]
    pub use_repair: bool,
    /// Start on the repair rate instead of read delay.
    #[serde(default)]
    pub start_with_repair: bool,
    #[serde(default)]
    pub measurement: Measurement,
    /// Idle simulated time between windows.
    #[serde(default)]
    pub pause: Micros,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            window: d_window(),
            repair_window: d_repair_window(),
            max_inc: d_max_inc(),
            read_delay_unit: d_rd_unit(),
            repair_unit: d_repair_unit(),
            use_repair: false,
            start_with_repair: false,
            measurement: Measurement::default(),
            pause: Micros::ZERO,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerState {
    pub stepper: Stepper,
    pub active: Knob,
}

impl ControllerState {
    pub fn new(config: &ControllerConfig) -> Self {
        ControllerState {
            stepper: Stepper::new(config.max_inc),
            active: if config.start_with_repair { Knob::RepairRate } else { Knob::ReadDelay },
        }
    }

    pub fn window(&self, config: &ControllerConfig) -> usize {
        match self.active {
            Knob::ReadDelay => config.window,
            Knob::RepairRate => config.repair_window,
        }
    }
}

/// `+1` when the SLA metric is above target. For a consistency SLA that
/// asks for more read delay, for a latency SLA for less.
pub fn wanted_direction(sla: &Sla, report: &MetricReport) -> i8 {
    if sla.sla_metric(report.p_ic, report.p_ua) > sla.target() {
        1
    } else {
        -1
    }
}

/// Whether moving in `dir` gives up consistency.
fn degrades_consistency(sla: &Sla, dir: i8) -> bool {
    match sla {
        Sla::Consistency(_) => dir < 0,
        Sla::Latency(_) => dir > 0,
    }
}

/// Read delay is preferred; the repair rate takes over only while
/// consistency must be given up and read delay has nothing left to give.
pub fn select_knob(
    state: &ControllerState,
    config: &ControllerConfig,
    knobs: &KnobState,
    sla: &Sla,
    dir: i8,
) -> Knob {
    if !config.use_repair {
        return if config.start_with_repair { Knob::RepairRate } else { Knob::ReadDelay };
    }
    let degrade = degrades_consistency(sla, dir);
    match state.active {
        Knob::RepairRate if degrade => Knob::RepairRate,
        Knob::RepairRate => Knob::ReadDelay,
        Knob::ReadDelay if degrade && knobs.read_delay == Micros::ZERO => Knob::RepairRate,
        Knob::ReadDelay => Knob::ReadDelay,
    }
}

/// One loop iteration: new controller state and knob settings.
pub fn control_iteration(
    state: ControllerState,
    config: &ControllerConfig,
    sla: &Sla,
    report: &MetricReport,
    knobs: KnobState,
    max_read_delay: Micros,
) -> (ControllerState, KnobState) {
    let dir = wanted_direction(sla, report);
    let knob = select_knob(&state, config, &knobs, sla, dir);
    let mut next = state;
    if knob != state.active {
        next.active = knob;
        next.stepper = Stepper::new(config.max_inc);
    }
    let units = next.stepper.step(dir);
    // Positive `more_consistency` moves toward fresher reads.
    let more_consistency = if degrades_consistency(sla, 1) { -units } else { units };
    let mut out = knobs;
    match knob {
        Knob::ReadDelay => {
            let delta = more_consistency * config.read_delay_unit.as_us() as i64;
            let max = i64::try_from(max_read_delay.as_us()).unwrap_or(i64::MAX);
            let v = (knobs.read_delay.as_us() as i64 + delta).clamp(0, max);
            out.read_delay = Micros(v as u64);
        }
        Knob::RepairRate => {
            let v = knobs.repair_rate + more_consistency as f64 * config.repair_unit;
            out.repair_rate = v.clamp(0.0, 1.0);
        }
    }
    (next, out)
}

/// One row of the per-iteration timeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimelineRow {
    pub iter: usize,
    pub sim_time: Micros,
    pub p_ic: f64,
    pub p_ua: f64,
    pub read_delay: Micros,
    pub repair_rate: f64,
    pub alpha: f64,
    /// Best achievable value of the metric the SLA does not constrain.
    pub p_opt: f64,
}

pub const TIMELINE_HEADER: &str = "iter,sim_time,p_ic,p_ua,read_delay_us,repair_rate,alpha,p_opt";

pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let mut out = String::from(TIMELINE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{:.4},{:.6},{:.6}",
            r.iter,
            r.sim_time.as_secs_f64(),
            r.p_ic,
            r.p_ua,
            r.read_delay.as_us(),
            r.repair_rate,
            r.alpha,
            r.p_opt
        );
    }
    out
}

/// Measurement machinery attached to one simulation.
pub struct Probe {
    rng: SimRng,
    index: WriteIndex,
    passive_seen: usize,
}

impl Probe {
    pub fn new(seed: u64) -> Self {
        Probe {
            rng: rng::stream(seed, Stream::Probe),
            index: WriteIndex::default(),
            passive_seen: 0,
        }
    }

    /// Injects `k` probe operations, waits for them and measures exactly
    /// those operations.
    #[allow(clippy::too_many_arguments)]
    pub fn measure_active(
        &mut self,
        sim: &mut Simulation,
        k: usize,
        probe_rate: f64,
        n_probe_keys: u64,
        read_fraction: f64,
        timeout: Micros,
        sla: &Sla,
    ) -> Result<MetricReport, ControllerError> {
        let n_clients = sim.config().n_servers;
        let first_key = sim.config().n_keys;
        let gap = Exp::new(probe_rate.max(1e-9) / 1e6).map_err(|_| ControllerError::Timeout(timeout))?;
        let mut ids = Vec::with_capacity(k);
        let mut at = sim.now();
        for _ in 0..k {
            at += Micros(gap.sample(&mut self.rng).round() as u64);
            sim.run_until(at);
            let kind = if self.rng.random_bool(read_fraction) { OpKind::Read } else { OpKind::Write };
            let key = first_key + self.rng.random_range(0..n_probe_keys.max(1));
            let client = self.rng.random_range(0..n_clients);
            let id = sim.submit(OpRequest { kind, key, client }, Origin::Probe)?;
            if kind == OpKind::Write {
                self.index.insert(&OpRecord::write(id, key, at, at, 0));
            }
            ids.push(id);
        }
        let first = ids.first().copied().unwrap_or(0);
        let deadline = sim.now() + timeout;
        let mut done: Vec<OpRecord> = Vec::with_capacity(k);
        loop {
            done.extend(sim.take_probes().into_iter().filter(|op| op.op_id >= first));
            if done.len() >= ids.len() {
                break;
            }
            if sim.now() >= deadline {
                return Err(ControllerError::Timeout(timeout));
            }
            let next = sim.now() + Micros::from_ms(10);
            sim.run_until(next);
        }
        Ok(compute_metrics_with(&done, &self.index, sla.t_c(), sla.t_a())?)
    }

    /// Metrics over the latest `n_ops` workload operations coordinated by
    /// `n_servers` randomly chosen servers.
    pub fn measure_passive(
        &mut self,
        sim: &Simulation,
        n_ops: usize,
        n_servers: usize,
        sla: &Sla,
    ) -> Result<MetricReport, ControllerError> {
        let log = sim.log();
        for op in &log[self.passive_seen..] {
            self.index.insert(op);
        }
        self.passive_seen = log.len();
        for w in sim.inflight_writes() {
            if !self.index.contains(w.op_id) {
                self.index.insert(&w);
            }
        }
        let n = sim.config().n_servers;
        let mut chosen: Vec<u32> = index::sample(&mut self.rng, n, n_servers.min(n))
            .into_iter()
            .map(|s| s as u32)
            .collect();
        chosen.sort_unstable();
        let sample: Vec<&OpRecord> = log
            .iter()
            .rev()
            .filter(|op| chosen.binary_search(&op.origin_server).is_ok())
            .take(n_ops)
            .collect();
        Ok(compute_metrics_with(sample, &self.index, sla.t_c(), sla.t_a())?)
    }
}

/// Drives a simulation under the control loop until `until`.
pub struct Controller {
    pub config: ControllerConfig,
    pub sla: Sla,
    pub state: ControllerState,
    probe: Probe,
    iter: usize,
}

impl Controller {
    pub fn new(config: ControllerConfig, sla: Sla, seed: u64) -> Self {
        Controller {
            state: ControllerState::new(&config),
            config,
            sla,
            probe: Probe::new(seed),
            iter: 0,
        }
    }

    fn measure(&mut self, sim: &mut Simulation) -> Result<MetricReport, ControllerError> {
        let k = self.state.window(&self.config);
        match self.config.measurement {
            Measurement::Active { probe_rate, n_probe_keys, read_fraction, timeout } => {
                self.probe.measure_active(sim, k, probe_rate, n_probe_keys, read_fraction, timeout, &self.sla)
            }
            Measurement::Passive { n_ops, n_servers } => {
                let until = sim.now() + self.config.pause.max(Micros::from_ms(100));
                sim.run_until(until);
                self.probe.measure_passive(sim, n_ops, n_servers, &self.sla)
            }
        }
    }

    /// Runs iterations until simulated time reaches `until`. `alpha_at`
    /// gives the partition fraction in force at a time.
    pub fn run(
        &mut self,
        sim: &mut Simulation,
        until: Micros,
        alpha_at: &dyn Fn(Micros) -> f64,
    ) -> Result<Vec<TimelineRow>, ControllerError> {
        let mut rows = Vec::new();
        while sim.now() < until {
            let report = match self.measure(sim) {
                Ok(r) => r,
                Err(ControllerError::Metrics(MetricsError::NoReads)) => continue,
                Err(e) => return Err(e),
            };
            let knobs = sim.knobs();
            let alpha = alpha_at(sim.now());
            let p_opt = match self.sla {
                Sla::Consistency(_) => envelope::optimal_p_ua(alpha, report.p_ic),
                Sla::Latency(_) => envelope::optimal_p_ic(alpha, report.p_ua),
            };
            rows.push(TimelineRow {
                iter: self.iter,
                sim_time: sim.now(),
                p_ic: report.p_ic,
                p_ua: report.p_ua,
                read_delay: knobs.read_delay,
                repair_rate: knobs.repair_rate,
                alpha,
                p_opt,
            });
            self.iter += 1;
            let max = sim.config().max_read_delay;
            let (state, next) = control_iteration(self.state, &self.config, &self.sla, &report, knobs, max);
            self.state = state;
            sim.set_knobs(next)?;
            if matches!(self.config.measurement, Measurement::Active { .. }) && self.config.pause > Micros::ZERO {
                let resume = sim.now() + self.config.pause;
                sim.run_until(resume);
            }
        }
        Ok(rows)
    }
}
