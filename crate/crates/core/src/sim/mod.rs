//! Discrete-event simulation of a single-data-center replicated store.
//!
//! A write travels client → coordinator → every replica and is acknowledged
//! once enough replicas answered. A read waits at the coordinator for the
//! configured read delay, is forwarded to every replica, and returns the
//! newest of the first responses. Once every replica has answered, a read
//! that saw an out-of-date replica may be queued for background repair.
//!
//! Replicas order values by `(write start, write id)`, last writer wins.

mod config;
mod workload;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use thiserror::Error;

pub use config::{ClusterConfig, ConfigError, KeyDistribution};
pub use workload::{generate_workload, Arrival, OpRequest, Workload};

use crate::delay::DelaySampler;
use crate::model::{KnobError, KnobState, OpKind, OpRecord, WriteRef};
use crate::rng::{self, splitmix64, SimRng, Stream};
use crate::Micros;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("knob out of range: {0}")]
    KnobOutOfRange(#[from] KnobError),
    #[error("server {0} does not exist")]
    NoSuchServer(usize),
    #[error("client {0} does not exist")]
    NoSuchClient(usize),
}

/// Who issued an operation; probe results are reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Workload,
    Probe,
}

/// A replica's view of one key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Version {
    pub ts: Micros,
    pub write: WriteRef,
}

impl Default for Version {
    fn default() -> Self {
        Version {
            ts: Micros::ZERO,
            write: WriteRef::Default,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: Micros,
    pub event_type: &'static str,
    pub server: usize,
    pub op_id: Option<u64>,
}

pub fn trace_csv(trace: &[TraceEvent]) -> String {
    let mut out = String::from("time,event_type,server,op_id\n");
    for e in trace {
        let op = e.op_id.map_or_else(String::new, |id| id.to_string());
        let _ = writeln!(out, "{},{},{},{}", e.time.as_us(), e.event_type, e.server, op);
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Arrival,
    CoordRecv { op: u64 },
    ReadForward { op: u64 },
    ReplicaWrite { op: u64, replica: usize, key: u64, version: Version },
    ReplicaRead { op: u64, replica: usize, key: u64 },
    ReadResponse { op: u64, replica: usize, version: Version },
    WriteAck { op: u64 },
    WriteTimeout { op: u64 },
    ClientReply { op: u64 },
    RepairTick,
    RepairApply { replica: usize, key: u64, version: Version },
}

impl Event {
    fn name(&self) -> &'static str {
        match self {
            Event::Arrival => "arrival",
            Event::CoordRecv { .. } => "coord_recv",
            Event::ReadForward { .. } => "read_forward",
            Event::ReplicaWrite { .. } => "replica_write",
            Event::ReplicaRead { .. } => "replica_read",
            Event::ReadResponse { .. } => "read_response",
            Event::WriteAck { .. } => "write_ack",
            Event::WriteTimeout { .. } => "write_timeout",
            Event::ClientReply { .. } => "client_reply",
            Event::RepairTick => "repair_tick",
            Event::RepairApply { .. } => "repair_apply",
        }
    }
}

struct Scheduled {
    at: Micros,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: the heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Op {
    kind: OpKind,
    key: u64,
    client: usize,
    coord: usize,
    start: Micros,
    origin: Origin,
    knobs: KnobState,
    required: usize,
    acks: usize,
    replied: bool,
    delivered: bool,
    /// Responses from replicas; only reads use this.
    responses: Vec<(usize, Version)>,
    expected: usize,
    result: Version,
}

struct RepairEntry {
    key: u64,
    version: Version,
    coord: usize,
    stale: Vec<usize>,
}

/// Everything a finished run produced.
#[derive(Clone, Debug, Default)]
pub struct SimOutput {
    pub log: Vec<OpRecord>,
    pub probes: Vec<OpRecord>,
    pub trace: Vec<TraceEvent>,
}

pub struct Simulation {
    config: ClusterConfig,
    knobs: KnobState,
    now: Micros,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    delays: DelaySampler,
    rng: SimRng,
    service: Option<LogNormal<f64>>,
    workload: Workload,
    replicas: Vec<HashMap<u64, Version>>,
    failed: Vec<bool>,
    ops: HashMap<u64, Op>,
    next_op: u64,
    repair: VecDeque<RepairEntry>,
    repair_pending: bool,
    log: Vec<OpRecord>,
    probes: Vec<OpRecord>,
    trace: Vec<TraceEvent>,
}

impl Simulation {
    pub fn new(config: ClusterConfig) -> Result<Self, SimError> {
        config.validate()?;
        let knobs = KnobState {
            consistency_level: config.consistency_level,
            ..KnobState::default()
        };
        let mut delay = config.delay.clone();
        delay.seed = config.seed;
        let mut sim = Simulation {
            knobs,
            now: Micros::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            delays: delay.sampler(),
            rng: rng::stream(config.seed, Stream::Store),
            service: config.service_time.distribution(),
            workload: Workload::new(&config),
            replicas: vec![HashMap::new(); config.n_servers],
            failed: vec![false; config.n_servers],
            ops: HashMap::new(),
            next_op: 0,
            repair: VecDeque::new(),
            repair_pending: false,
            log: Vec::new(),
            probes: Vec::new(),
            trace: Vec::new(),
            config,
        };
        let first = sim.workload.peek();
        if first != Micros::MAX {
            sim.schedule(first, Event::Arrival);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn knobs(&self) -> KnobState {
        self.knobs
    }

    /// New knob values apply to operations issued from now on.
    pub fn set_knobs(&mut self, knobs: KnobState) -> Result<(), SimError> {
        knobs.validate(self.config.max_read_delay)?;
        self.knobs = knobs;
        Ok(())
    }

    /// A failed server drops every message addressed to it.
    pub fn set_failed(&mut self, server: usize, failed: bool) -> Result<(), SimError> {
        let slot = self.failed.get_mut(server).ok_or(SimError::NoSuchServer(server))?;
        *slot = failed;
        Ok(())
    }

    /// Servers holding `key`: `replication_factor` consecutive servers on
    /// the ring from the key's hash.
    pub fn replicas_of(&self, key: u64) -> Vec<usize> {
        let n = self.config.n_servers;
        let first = (splitmix64(key) % n as u64) as usize;
        (0..self.config.replication_factor).map(|i| (first + i) % n).collect()
    }

    /// The value a replica currently holds for `key`.
    pub fn replica_version(&self, server: usize, key: u64) -> Version {
        self.replicas[server].get(&key).copied().unwrap_or_default()
    }

    /// Completed workload operations so far (empty when not logging them).
    pub fn log(&self) -> &[OpRecord] {
        &self.log
    }

    /// Completed probe operations since the last call.
    pub fn take_probes(&mut self) -> Vec<OpRecord> {
        std::mem::take(&mut self.probes)
    }

    /// Writes whose acknowledgement has not reached the client yet, with
    /// their finish set to now.
    pub fn inflight_writes(&self) -> Vec<OpRecord> {
        let mut out: Vec<OpRecord> = self
            .ops
            .iter()
            .filter(|(_, op)| op.kind == OpKind::Write && !op.delivered)
            .map(|(&id, op)| OpRecord::write(id, op.key, op.start, self.now, op.coord as u32))
            .collect();
        out.sort_unstable_by_key(|op| op.op_id);
        out
    }

    pub fn repair_backlog(&self) -> usize {
        self.repair.len()
    }

    /// Issues an operation from `request.client` at the current time.
    pub fn submit(&mut self, request: OpRequest, origin: Origin) -> Result<u64, SimError> {
        if request.client >= self.config.n_servers {
            return Err(SimError::NoSuchClient(request.client));
        }
        Ok(self.issue(request, origin))
    }

    /// Processes every event strictly before `until` and advances the clock
    /// to `until`.
    pub fn run_until(&mut self, until: Micros) {
        while self.queue.peek().is_some_and(|s| s.at < until) {
            if let Some(s) = self.queue.pop() {
                self.now = s.at;
                self.handle(s.event);
            }
        }
        self.now = self.now.max(until);
    }

    /// Stops the run. Writes still waiting for acknowledgement are completed
    /// at the current time so that every returned value has a write record.
    pub fn finish(mut self) -> SimOutput {
        for w in self.inflight_writes() {
            let origin = self.ops.get(&w.op_id).map(|op| op.origin);
            match origin {
                Some(Origin::Probe) => self.probes.push(w),
                _ if self.config.log_workload => self.log.push(w),
                _ => {}
            }
        }
        SimOutput {
            log: self.log,
            probes: self.probes,
            trace: self.trace,
        }
    }

    fn schedule(&mut self, at: Micros, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, event });
    }

    fn send(&mut self, from: usize, to: usize, extra: Micros, event: Event) {
        let hop = self.delays.sample(from, to, self.now);
        self.schedule(self.now + extra + hop, event);
    }

    fn service_time(&mut self) -> Micros {
        match &self.service {
            Some(d) => Micros::from_ms_f64(d.sample(&mut self.rng)),
            None => Micros::ZERO,
        }
    }

    fn issue(&mut self, request: OpRequest, origin: Origin) -> u64 {
        let id = self.next_op;
        self.next_op += 1;
        let live: Vec<usize> = (0..self.config.n_servers).filter(|&s| !self.failed[s]).collect();
        let coord = if live.is_empty() {
            self.rng.random_range(0..self.config.n_servers)
        } else {
            live[self.rng.random_range(0..live.len())]
        };
        let rf = self.config.replication_factor;
        self.ops.insert(
            id,
            Op {
                kind: request.kind,
                key: request.key,
                client: request.client,
                coord,
                start: self.now,
                origin,
                knobs: self.knobs,
                required: self.knobs.consistency_level.required(rf),
                acks: 0,
                replied: false,
                delivered: false,
                responses: Vec::new(),
                expected: 0,
                result: Version::default(),
            },
        );
        self.send(request.client, coord, Micros::ZERO, Event::CoordRecv { op: id });
        id
    }

    fn record(&mut self, kind: &'static str, server: usize, op: Option<u64>) {
        if self.config.trace {
            self.trace.push(TraceEvent {
                time: self.now,
                event_type: kind,
                server,
                op_id: op,
            });
        }
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Arrival => {
                if let Some(a) = self.workload.next_arrival() {
                    let id = self.issue(a.request, Origin::Workload);
                    self.record(event.name(), a.request.client, Some(id));
                }
                let next = self.workload.peek();
                if next != Micros::MAX {
                    self.schedule(next, Event::Arrival);
                }
            }
            Event::CoordRecv { op } => {
                let Some(o) = self.ops.get(&op) else { return };
                let (coord, kind, key, start, delay) = (o.coord, o.kind, o.key, o.start, o.knobs.read_delay);
                self.record(event.name(), coord, Some(op));
                if self.failed[coord] {
                    return;
                }
                match kind {
                    OpKind::Write => {
                        let version = Version { ts: start, write: WriteRef::Write(op) };
                        for r in self.replicas_of(key) {
                            self.send(coord, r, Micros::ZERO, Event::ReplicaWrite { op, replica: r, key, version });
                        }
                        let timeout = self.now + self.config.write_timeout;
                        self.schedule(timeout, Event::WriteTimeout { op });
                    }
                    OpKind::Read => self.schedule(self.now + delay, Event::ReadForward { op }),
                }
            }
            Event::ReadForward { op } => {
                let Some(o) = self.ops.get(&op) else { return };
                let (coord, key) = (o.coord, o.key);
                self.record(event.name(), coord, Some(op));
                let replicas = self.replicas_of(key);
                let live = replicas.iter().filter(|&&r| !self.failed[r]).count();
                if let Some(o) = self.ops.get_mut(&op) {
                    o.expected = live;
                }
                for r in replicas {
                    self.send(coord, r, Micros::ZERO, Event::ReplicaRead { op, replica: r, key });
                }
            }
            Event::ReplicaWrite { op, replica, key, version } => {
                self.record(event.name(), replica, Some(op));
                if self.failed[replica] || self.rng.random_bool(self.config.mutation_drop) {
                    return;
                }
                self.apply(replica, key, version);
                let Some(coord) = self.ops.get(&op).map(|o| o.coord) else { return };
                let svc = self.service_time();
                self.send(replica, coord, svc, Event::WriteAck { op });
            }
            Event::ReplicaRead { op, replica, key } => {
                self.record(event.name(), replica, Some(op));
                if self.failed[replica] {
                    return;
                }
                let version = self.replica_version(replica, key);
                let Some(coord) = self.ops.get(&op).map(|o| o.coord) else { return };
                let svc = self.service_time();
                self.send(replica, coord, svc, Event::ReadResponse { op, replica, version });
            }
            Event::WriteAck { op } => {
                let Some(o) = self.ops.get_mut(&op) else { return };
                let coord = o.coord;
                o.acks += 1;
                let reply = !o.replied && o.acks >= o.required;
                self.record(event.name(), coord, Some(op));
                if reply && !self.failed[coord] {
                    self.reply(op);
                }
            }
            Event::WriteTimeout { op } => {
                let Some(o) = self.ops.get(&op) else { return };
                let (coord, replied) = (o.coord, o.replied);
                self.record(event.name(), coord, Some(op));
                if !replied {
                    self.reply(op);
                }
            }
            Event::ReadResponse { op, replica, version } => {
                let Some(o) = self.ops.get_mut(&op) else { return };
                let coord = o.coord;
                o.responses.push((replica, version));
                let reply = !o.replied && o.responses.len() >= o.required;
                if reply {
                    o.result = o.responses.iter().map(|(_, v)| *v).max().unwrap_or_default();
                }
                let complete = o.responses.len() >= o.expected;
                self.record(event.name(), coord, Some(op));
                if self.failed[coord] {
                    return;
                }
                if reply {
                    self.reply(op);
                }
                if complete {
                    self.maybe_queue_repair(op);
                    if self.ops.get(&op).is_some_and(|o| o.delivered) {
                        self.ops.remove(&op);
                    }
                }
            }
            Event::ClientReply { op } => {
                let Some(o) = self.ops.get_mut(&op) else { return };
                o.delivered = true;
                let client = o.client;
                self.record(event.name(), client, Some(op));
                let o = &self.ops[&op];
                let rec = match o.kind {
                    OpKind::Write => OpRecord::write(op, o.key, o.start, self.now, o.coord as u32),
                    OpKind::Read => OpRecord::read(op, o.key, o.result.write, o.start, self.now, o.coord as u32),
                };
                let done = o.kind == OpKind::Write || o.responses.len() >= o.expected;
                match o.origin {
                    Origin::Probe => self.probes.push(rec),
                    Origin::Workload if self.config.log_workload => self.log.push(rec),
                    Origin::Workload => {}
                }
                if done {
                    self.ops.remove(&op);
                }
            }
            Event::RepairTick => {
                self.record(event.name(), 0, None);
                self.repair_pending = false;
                if let Some(entry) = self.repair.pop_back() {
                    for r in entry.stale {
                        let (key, version) = (entry.key, entry.version);
                        self.send(entry.coord, r, Micros::ZERO, Event::RepairApply { replica: r, key, version });
                    }
                }
                if !self.repair.is_empty() {
                    self.arm_repair();
                }
            }
            Event::RepairApply { replica, key, version } => {
                self.record(event.name(), replica, None);
                if !self.failed[replica] {
                    self.apply(replica, key, version);
                }
            }
        }
    }

    fn apply(&mut self, replica: usize, key: u64, version: Version) {
        let slot = self.replicas[replica].entry(key).or_default();
        if version > *slot {
            *slot = version;
        }
    }

    fn reply(&mut self, op: u64) {
        let Some(o) = self.ops.get_mut(&op) else { return };
        o.replied = true;
        let (coord, client) = (o.coord, o.client);
        self.send(coord, client, Micros::ZERO, Event::ClientReply { op });
    }

    fn maybe_queue_repair(&mut self, op: u64) {
        let Some(o) = self.ops.get(&op) else { return };
        let newest = o.responses.iter().map(|(_, v)| *v).max().unwrap_or_default();
        let mut stale: Vec<usize> = o.responses.iter().filter(|(_, v)| *v < newest).map(|(r, _)| *r).collect();
        let (key, coord, rate) = (o.key, o.coord, o.knobs.repair_rate);
        if stale.is_empty() || !self.rng.random_bool(rate) {
            return;
        }
        if self.config.repair_capacity == 0 {
            return;
        }
        if self.repair.len() >= self.config.repair_capacity {
            self.repair.pop_front();
        }
        stale.sort_unstable();
        self.repair.push_back(RepairEntry { key, version: newest, coord, stale });
        if !self.repair_pending {
            self.arm_repair();
        }
    }

    fn arm_repair(&mut self) {
        self.repair_pending = true;
        let at = self.now + self.config.repair_interval;
        self.schedule(at, Event::RepairTick);
    }
}

/// Runs a simulation for `duration`, switching knobs at the scheduled
/// instants (the first entry may be at zero).
pub fn run_simulation(
    config: ClusterConfig,
    knob_schedule: &[(Micros, KnobState)],
    duration: Micros,
) -> Result<SimOutput, SimError> {
    let mut sim = Simulation::new(config)?;
    for &(at, knobs) in knob_schedule {
        sim.run_until(at.min(duration));
        sim.set_knobs(knobs)?;
    }
    sim.run_until(duration);
    Ok(sim.finish())
}
