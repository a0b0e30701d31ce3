//! Domain types shared by the simulator, metrics, envelope and controllers.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Micros;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    Write,
}

/// Identity of the write whose value an operation carries.
///
/// `Default` is the virtual write that installs every key's initial value at
/// time zero. It orders before every real write.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WriteRef {
    Default,
    Write(u64),
}

impl WriteRef {
    /// Wire encoding; the default value is `-1`.
    pub fn encode(self) -> i64 {
        match self {
            WriteRef::Default => -1,
            WriteRef::Write(id) => id as i64,
        }
    }

    pub fn decode(raw: i64) -> Option<Self> {
        match raw {
            -1 => Some(WriteRef::Default),
            id if id >= 0 => Some(WriteRef::Write(id as u64)),
            _ => None,
        }
    }
}

/// One completed read or write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub op_id: u64,
    pub kind: OpKind,
    pub key: u64,
    /// For writes this is always `Write(op_id)`.
    pub write_id: WriteRef,
    pub start: Micros,
    pub finish: Micros,
    pub origin_server: u32,
}

impl OpRecord {
    pub fn write(op_id: u64, key: u64, start: Micros, finish: Micros, origin: u32) -> Self {
        OpRecord {
            op_id,
            kind: OpKind::Write,
            key,
            write_id: WriteRef::Write(op_id),
            start,
            finish,
            origin_server: origin,
        }
    }

    pub fn read(
        op_id: u64,
        key: u64,
        returned: WriteRef,
        start: Micros,
        finish: Micros,
        origin: u32,
    ) -> Self {
        OpRecord {
            op_id,
            kind: OpKind::Read,
            key,
            write_id: returned,
            start,
            finish,
            origin_server: origin,
        }
    }

    pub fn is_read(&self) -> bool {
        self.kind == OpKind::Read
    }

    pub fn latency(&self) -> Micros {
        self.finish.saturating_sub(self.start)
    }

    /// `op_id,kind,key,write_id,start_us,finish_us,origin_server`
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.op_id,
            match self.kind {
                OpKind::Read => 'R',
                OpKind::Write => 'W',
            },
            self.key,
            self.write_id.encode(),
            self.start.as_us(),
            self.finish.as_us(),
            self.origin_server
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("read {read} references unknown write {write}")]
    DanglingWriteRef { read: u64, write: i64 },
    #[error("op {op} finishes before it starts")]
    NegativeSpan { op: u64 },
    #[error("duplicate op id {op}")]
    DuplicateOpId { op: u64 },
    #[error("write {op} carries write id {write_id} instead of its own id")]
    ForeignWriteId { op: u64, write_id: i64 },
    #[error("read {read} returns write {write} which belongs to a different key")]
    KeyMismatch { read: u64, write: u64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl FromStr for OpRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.trim().split(',').collect();
        if fields.len() != 7 {
            return Err(format!("expected 7 fields, found {}", fields.len()));
        }
        let num = |i: usize, name: &str| -> Result<u64, String> {
            fields[i]
                .trim()
                .parse::<u64>()
                .map_err(|e| format!("bad {name} {:?}: {e}", fields[i]))
        };
        let kind = match fields[1].trim() {
            "R" => OpKind::Read,
            "W" => OpKind::Write,
            other => return Err(format!("bad kind {other:?}")),
        };
        let raw_write: i64 = fields[3]
            .trim()
            .parse()
            .map_err(|e| format!("bad write_id {:?}: {e}", fields[3]))?;
        let write_id =
            WriteRef::decode(raw_write).ok_or_else(|| format!("bad write_id {raw_write}"))?;
        let origin = num(6, "origin_server")?;
        Ok(OpRecord {
            op_id: num(0, "op_id")?,
            kind,
            key: num(2, "key")?,
            write_id,
            start: Micros(num(4, "start_us")?),
            finish: Micros(num(5, "finish_us")?),
            origin_server: u32::try_from(origin).map_err(|_| "origin_server out of range")?,
        })
    }
}

/// Checks every record invariant and returns the log unchanged when it holds.
pub fn validate_log(log: Vec<OpRecord>) -> Result<Vec<OpRecord>, LogError> {
    let mut ids = HashSet::with_capacity(log.len());
    let mut write_keys = std::collections::HashMap::new();
    for op in &log {
        if op.finish < op.start {
            return Err(LogError::NegativeSpan { op: op.op_id });
        }
        if !ids.insert(op.op_id) {
            return Err(LogError::DuplicateOpId { op: op.op_id });
        }
        if op.kind == OpKind::Write {
            if op.write_id != WriteRef::Write(op.op_id) {
                return Err(LogError::ForeignWriteId {
                    op: op.op_id,
                    write_id: op.write_id.encode(),
                });
            }
            write_keys.insert(op.op_id, op.key);
        }
    }
    for op in log.iter().filter(|op| op.is_read()) {
        if let WriteRef::Write(w) = op.write_id {
            match write_keys.get(&w) {
                None => {
                    return Err(LogError::DanglingWriteRef {
                        read: op.op_id,
                        write: w as i64,
                    })
                }
                Some(&key) if key != op.key => {
                    return Err(LogError::KeyMismatch {
                        read: op.op_id,
                        write: w,
                    })
                }
                _ => {}
            }
        }
    }
    Ok(log)
}

pub fn write_log<W: Write>(mut out: W, log: &[OpRecord]) -> io::Result<()> {
    for op in log {
        writeln!(out, "{}", op.to_line())?;
    }
    Ok(())
}

/// Parses a log; blank lines are skipped. The result is not validated.
pub fn read_log<R: BufRead>(input: R) -> Result<Vec<OpRecord>, LogError> {
    let mut log = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| LogError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        log.push(line.parse().map_err(|reason| LogError::Parse {
            line: i + 1,
            reason,
        })?);
    }
    Ok(log)
}

#[derive(Debug, Error, PartialEq)]
pub enum SlaError {
    #[error("probability {name} = {value} outside [0, 1]")]
    Probability { name: &'static str, value: f64 },
    #[error("laxity {epsilon} exceeds the SLA bound {bound}")]
    Laxity { epsilon: f64, bound: f64 },
}

fn check_probability(name: &'static str, value: f64) -> Result<(), SlaError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(SlaError::Probability { name, value })
    }
}

pub const DEFAULT_LAXITY: f64 = 0.05;

/// Keep the stale-read fraction under `p_ic_sla` at freshness bound `t_c`,
/// minimising the fraction of reads slower than `t_a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySla {
    pub p_ic_sla: f64,
    pub t_c: Micros,
    pub t_a: Micros,
    #[serde(default = "default_laxity")]
    pub epsilon: f64,
}

/// Keep the late-read fraction under `p_ua_sla` at deadline `t_a`,
/// minimising staleness at `t_c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySla {
    pub p_ua_sla: f64,
    pub t_a: Micros,
    pub t_c: Micros,
    #[serde(default = "default_laxity")]
    pub epsilon: f64,
}

fn default_laxity() -> f64 {
    DEFAULT_LAXITY
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sla {
    Consistency(ConsistencySla),
    Latency(LatencySla),
}

impl Sla {
    pub fn bound(&self) -> f64 {
        match self {
            Sla::Consistency(s) => s.p_ic_sla,
            Sla::Latency(s) => s.p_ua_sla,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            Sla::Consistency(s) => s.epsilon,
            Sla::Latency(s) => s.epsilon,
        }
    }

    /// The bound the control loop actually steers to: `bound − ε`.
    pub fn target(&self) -> f64 {
        self.bound() - self.epsilon()
    }

    pub fn t_c(&self) -> Micros {
        match self {
            Sla::Consistency(s) => s.t_c,
            Sla::Latency(s) => s.t_c,
        }
    }

    pub fn t_a(&self) -> Micros {
        match self {
            Sla::Consistency(s) => s.t_a,
            Sla::Latency(s) => s.t_a,
        }
    }

    /// The metric this SLA constrains, picked out of a `(p_ic, p_ua)` pair.
    pub fn sla_metric(&self, p_ic: f64, p_ua: f64) -> f64 {
        match self {
            Sla::Consistency(_) => p_ic,
            Sla::Latency(_) => p_ua,
        }
    }

    pub fn validate(&self) -> Result<(), SlaError> {
        let (name, bound) = match self {
            Sla::Consistency(s) => ("p_ic_sla", s.p_ic_sla),
            Sla::Latency(s) => ("p_ua_sla", s.p_ua_sla),
        };
        check_probability(name, bound)?;
        let epsilon = self.epsilon();
        if !(0.0..=bound).contains(&epsilon) {
            return Err(SlaError::Laxity { epsilon, bound });
        }
        Ok(())
    }
}

/// `(t_p, α)` soft partition: at least `α` of client-to-client paths via a
/// server take longer than `t_p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionModel {
    pub t_p: Micros,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConsistencyLevel {
    One,
    Two,
    Quorum,
    All,
}

impl ConsistencyLevel {
    /// Replica responses the coordinator waits for.
    pub fn required(self, replication_factor: usize) -> usize {
        match self {
            ConsistencyLevel::One => 1,
            ConsistencyLevel::Two => 2.min(replication_factor),
            ConsistencyLevel::Quorum => replication_factor / 2 + 1,
            ConsistencyLevel::All => replication_factor,
        }
    }
}

impl fmt::Display for ConsistencyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConsistencyLevel::One => "ONE",
            ConsistencyLevel::Two => "TWO",
            ConsistencyLevel::Quorum => "QUORUM",
            ConsistencyLevel::All => "ALL",
        };
        f.write_str(s)
    }
}

pub const DEFAULT_MAX_READ_DELAY: Micros = Micros::from_ms(10);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnobState {
    #[serde(default)]
    pub read_delay: Micros,
    #[serde(default = "default_repair_rate")]
    pub repair_rate: f64,
    #[serde(default = "default_cl")]
    pub consistency_level: ConsistencyLevel,
}

fn default_repair_rate() -> f64 {
    0.1
}

fn default_cl() -> ConsistencyLevel {
    ConsistencyLevel::One
}

impl Default for KnobState {
    fn default() -> Self {
        KnobState {
            read_delay: Micros::ZERO,
            repair_rate: default_repair_rate(),
            consistency_level: ConsistencyLevel::One,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KnobError {
    #[error("read delay {value} exceeds maximum {max}")]
    ReadDelay { value: Micros, max: Micros },
    #[error("repair rate {0} outside [0, 1]")]
    RepairRate(f64),
}

impl KnobState {
    pub fn validate(&self, max_read_delay: Micros) -> Result<(), KnobError> {
        if self.read_delay > max_read_delay {
            return Err(KnobError::ReadDelay {
                value: self.read_delay,
                max: max_read_delay,
            });
        }
        if !(0.0..=1.0).contains(&self.repair_rate) {
            return Err(KnobError::RepairRate(self.repair_rate));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> Micros {
        Micros::from_ms(v)
    }

    #[test]
    fn empty_log_is_valid() {
        assert_eq!(validate_log(vec![]).unwrap().len(), 0);
    }

    #[test]
    fn minimal_write_then_read_is_valid() {
        let log = vec![
            OpRecord::write(1, 7, ms(1), ms(2), 0),
            OpRecord::read(2, 7, WriteRef::Write(1), ms(3), ms(4), 1),
        ];
        assert_eq!(validate_log(log.clone()).unwrap(), log);
    }

    #[test]
    fn dangling_reference_is_rejected() {
        let log = vec![
            OpRecord::write(1, 7, ms(1), ms(2), 0),
            OpRecord::read(2, 7, WriteRef::Write(99), ms(3), ms(4), 1),
        ];
        assert_eq!(
            validate_log(log),
            Err(LogError::DanglingWriteRef { read: 2, write: 99 })
        );
    }

    #[test]
    fn negative_span_is_rejected() {
        let log = vec![OpRecord::write(1, 7, ms(5), ms(2), 0)];
        assert_eq!(validate_log(log), Err(LogError::NegativeSpan { op: 1 }));
    }

    #[test]
    fn default_reference_needs_no_write() {
        let log = vec![OpRecord::read(2, 7, WriteRef::Default, ms(3), ms(4), 1)];
        assert!(validate_log(log).is_ok());
    }

    #[test]
    fn write_must_carry_own_id() {
        let mut w = OpRecord::write(1, 7, ms(1), ms(2), 0);
        w.write_id = WriteRef::Write(3);
        assert!(matches!(
            validate_log(vec![w]),
            Err(LogError::ForeignWriteId { .. })
        ));
    }

    #[test]
    fn default_encodes_as_minus_one() {
        let r = OpRecord::read(4, 2, WriteRef::Default, ms(1), ms(3), 5);
        assert_eq!(r.to_line(), "4,R,2,-1,1000,3000,5");
        assert_eq!(r.to_line().parse::<OpRecord>().unwrap(), r);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let text = "1,W,0,1,0,5,0\n2,X,0,1,6,9,0\n";
        match read_log(text.as_bytes()) {
            Err(LogError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn consistency_levels_map_to_response_counts() {
        assert_eq!(ConsistencyLevel::One.required(3), 1);
        assert_eq!(ConsistencyLevel::Quorum.required(3), 2);
        assert_eq!(ConsistencyLevel::All.required(3), 3);
        assert_eq!(ConsistencyLevel::Two.required(1), 1);
    }

    #[test]
    fn knob_bounds() {
        let k = KnobState {
            read_delay: ms(11),
            ..KnobState::default()
        };
        assert!(k.validate(DEFAULT_MAX_READ_DELAY).is_err());
        let k = KnobState {
            repair_rate: 1.5,
            ..KnobState::default()
        };
        assert_eq!(k.validate(DEFAULT_MAX_READ_DELAY), Err(KnobError::RepairRate(1.5)));
    }

    #[test]
    fn sla_laxity_validation() {
        let ok = Sla::Latency(LatencySla {
            p_ua_sla: 0.2375,
            t_a: ms(150),
            t_c: ms(0),
            epsilon: 0.05,
        });
        assert!(ok.validate().is_ok());
        assert!((ok.target() - 0.1875).abs() < 1e-12);
        let bad = Sla::Consistency(ConsistencySla {
            p_ic_sla: 0.01,
            t_c: ms(0),
            t_a: ms(100),
            epsilon: 0.05,
        });
        assert!(bad.validate().is_err());
    }

    fn arb_log() -> impl Strategy<Value = Vec<OpRecord>> {
        prop::collection::vec((any::<bool>(), 0u64..4, 0u64..1_000_000, 0u64..50_000, 0u32..9), 0..60)
            .prop_map(|ops| {
                let mut log = Vec::new();
                let mut writes: Vec<(u64, u64)> = Vec::new();
                for (i, (is_write, key, start, span, origin)) in ops.into_iter().enumerate() {
                    let id = i as u64;
                    if is_write {
                        writes.push((id, key));
                        log.push(OpRecord::write(id, key, Micros(start), Micros(start + span), origin));
                    } else {
                        let returned = writes
                            .iter()
                            .rev()
                            .find(|(_, k)| *k == key)
                            .map(|(w, _)| WriteRef::Write(*w))
                            .unwrap_or(WriteRef::Default);
                        log.push(OpRecord::read(id, key, returned, Micros(start), Micros(start + span), origin));
                    }
                }
                log
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(log in arb_log()) {
            let log = validate_log(log).unwrap();
            let mut buf = Vec::new();
            write_log(&mut buf, &log).unwrap();
            let back = read_log(buf.as_slice()).unwrap();
            prop_assert_eq!(back, log);
        }
    }
}
