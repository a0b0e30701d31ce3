//! Freshness verdicts and the `p_ic` / `p_ua` window metrics.
//!
//! Writes are indexed per key by start time, and each read then costs one
//! binary search, so a window of `k` operations is processed in
//! `O(k log k)`.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{OpRecord, WriteRef};
use crate::Micros;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("window contains no reads")]
    NoReads,
    #[error("read {read} returns write {write} which is not in the log")]
    UnknownWrite { read: u64, write: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub p_ic: f64,
    pub p_ua: f64,
    pub n_reads: usize,
    pub t_c: Micros,
    pub t_a: Micros,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "window_id,n_reads,p_ic,p_ua";

    pub fn csv_row(&self, window_id: usize) -> String {
        let mut s = String::new();
        let _ = write!(s, "{window_id},{},{:.6},{:.6}", self.n_reads, self.p_ic, self.p_ua);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Entry {
    at: Micros,
    id: u64,
}

/// Per-key write starts (and ends) in ascending order.
#[derive(Clone, Debug, Default)]
pub struct WriteIndex {
    by_start: HashMap<u64, Vec<Entry>>,
    by_end: HashMap<u64, Vec<Entry>>,
    spans: HashMap<u64, (Micros, Micros)>,
}

fn insert_sorted(v: &mut Vec<Entry>, e: Entry) {
    if v.last().is_none_or(|last| *last <= e) {
        v.push(e);
    } else {
        let at = v.partition_point(|x| *x <= e);
        v.insert(at, e);
    }
}

fn remove_sorted(v: &mut Vec<Entry>, e: Entry) {
    if let Ok(at) = v.binary_search(&e) {
        v.remove(at);
    }
}

impl WriteIndex {
    pub fn build<'a>(log: impl IntoIterator<Item = &'a OpRecord>) -> Self {
        let mut idx = WriteIndex::default();
        for op in log {
            if !op.is_read() {
                idx.by_start.entry(op.key).or_default().push(Entry { at: op.start, id: op.op_id });
                idx.by_end.entry(op.key).or_default().push(Entry { at: op.finish, id: op.op_id });
                idx.spans.insert(op.op_id, (op.start, op.finish));
            }
        }
        for v in idx.by_start.values_mut().chain(idx.by_end.values_mut()) {
            v.sort_unstable();
        }
        idx
    }

    /// Adds a write, replacing an earlier entry with the same id; reads are
    /// ignored.
    pub fn insert(&mut self, op: &OpRecord) {
        if op.is_read() {
            return;
        }
        if let Some((start, end)) = self.spans.remove(&op.op_id) {
            remove_sorted(self.by_start.entry(op.key).or_default(), Entry { at: start, id: op.op_id });
            remove_sorted(self.by_end.entry(op.key).or_default(), Entry { at: end, id: op.op_id });
        }
        insert_sorted(self.by_start.entry(op.key).or_default(), Entry { at: op.start, id: op.op_id });
        insert_sorted(self.by_end.entry(op.key).or_default(), Entry { at: op.finish, id: op.op_id });
        self.spans.insert(op.op_id, (op.start, op.finish));
    }

    pub fn contains(&self, write_id: u64) -> bool {
        self.spans.contains_key(&write_id)
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Write start times for `key`, ascending.
    pub fn starts(&self, key: u64) -> Vec<Micros> {
        self.by_start.get(&key).map_or_else(Vec::new, |v| v.iter().map(|e| e.at).collect())
    }

    fn span(&self, read: &OpRecord) -> Result<(Micros, Micros), MetricsError> {
        match read.write_id {
            WriteRef::Default => Ok((Micros::ZERO, Micros::ZERO)),
            WriteRef::Write(w) => self
                .spans
                .get(&w)
                .copied()
                .ok_or(MetricsError::UnknownWrite { read: read.op_id, write: w }),
        }
    }
}

fn cutoff(times: &[Entry], read_start: Micros, t: Micros) -> Micros {
    let lo = read_start.saturating_sub(t);
    let first_in = times.partition_point(|e| e.at < lo);
    if times.get(first_in).is_some_and(|e| e.at <= read_start) {
        return lo;
    }
    if first_in == 0 {
        return Micros::ZERO;
    }
    times[first_in - 1].at
}

/// Freshness cutoff for a read starting at `read_start` on a key whose
/// writes start at `starts` (ascending, default value excluded).
///
/// * some write starts in `[read_start − t, read_start]`: the window start;
/// * no write starts before the read: zero;
/// * otherwise the start of the last write before the window.
pub fn tau_fresh(read_start: Micros, t: Micros, starts: &[Micros]) -> Micros {
    let lo = read_start.saturating_sub(t);
    let first_in = starts.partition_point(|&s| s < lo);
    if starts.get(first_in).is_some_and(|&s| s <= read_start) {
        return lo;
    }
    if first_in == 0 {
        return Micros::ZERO;
    }
    starts[first_in - 1]
}

/// Whether `read` is t-fresh; `returned_start` is the start of the write it
/// returned (zero for the default value).
pub fn is_t_fresh(read_start: Micros, returned_start: Micros, t: Micros, starts: &[Micros]) -> bool {
    returned_start >= tau_fresh(read_start, t, starts)
}

impl WriteIndex {
    /// t-freshness verdict for one read against this index.
    pub fn is_fresh(&self, read: &OpRecord, t: Micros) -> Result<bool, MetricsError> {
        let (start, _) = self.span(read)?;
        let times = self.by_start.get(&read.key).map_or(&[][..], |v| v.as_slice());
        Ok(start >= cutoff(times, read.start, t))
    }

    /// t-visibility verdict: the same cutoff rule on write end times. A read
    /// that passes t-freshness also passes.
    pub fn is_visible(&self, read: &OpRecord, t: Micros) -> Result<bool, MetricsError> {
        if self.is_fresh(read, t)? {
            return Ok(true);
        }
        let (_, end) = self.span(read)?;
        let times = self.by_end.get(&read.key).map_or(&[][..], |v| v.as_slice());
        Ok(end >= cutoff(times, read.start, t))
    }
}

/// Metrics over `reads` (non-reads are skipped) against a prebuilt index.
pub fn compute_metrics_with<'a>(
    reads: impl IntoIterator<Item = &'a OpRecord>,
    index: &WriteIndex,
    t_c: Micros,
    t_a: Micros,
) -> Result<MetricReport, MetricsError> {
    let (mut n, mut stale, mut late) = (0usize, 0usize, 0usize);
    for r in reads.into_iter().filter(|op| op.is_read()) {
        n += 1;
        if !index.is_fresh(r, t_c)? {
            stale += 1;
        }
        if r.latency() > t_a {
            late += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoReads);
    }
    Ok(MetricReport {
        p_ic: stale as f64 / n as f64,
        p_ua: late as f64 / n as f64,
        n_reads: n,
        t_c,
        t_a,
    })
}

/// `p_ic` at freshness bound `t_c` and `p_ua` at deadline `t_a` over a log.
pub fn compute_metrics(log: &[OpRecord], t_c: Micros, t_a: Micros) -> Result<MetricReport, MetricsError> {
    let index = WriteIndex::build(log);
    compute_metrics_with(log, &index, t_c, t_a)
}

/// Fraction of reads that are stale under the end-time based t-visibility
/// rule. In-flight writes always count as fresh.
pub fn compute_t_visibility(log: &[OpRecord], t: Micros) -> Result<f64, MetricsError> {
    let index = WriteIndex::build(log);
    let (mut n, mut stale) = (0usize, 0usize);
    for r in log.iter().filter(|op| op.is_read()) {
        n += 1;
        if !index.is_visible(r, t)? {
            stale += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoReads);
    }
    Ok(stale as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{oracle_is_fresh, random_log};
    use proptest::prelude::*;

    fn ms(v: u64) -> Micros {
        Micros::from_ms(v)
    }

    fn w(id: u64, start: u64, end: u64) -> OpRecord {
        OpRecord::write(id, 0, ms(start), ms(end), 0)
    }

    fn r(id: u64, ret: Option<u64>, start: u64, end: u64) -> OpRecord {
        let ret = ret.map_or(WriteRef::Default, WriteRef::Write);
        OpRecord::read(id, 0, ret, ms(start), ms(end), 0)
    }

    // Read at 100 with t = 20: writes 2, 3 start inside [80, 100] and
    // write 4 starts while the read runs.
    #[test]
    fn window_case_accepts_writes_in_window_and_later() {
        let writes = [w(1, 50, 55), w(2, 85, 90), w(3, 95, 99), w(4, 102, 110)];
        let idx = WriteIndex::build(&writes);
        assert_eq!(tau_fresh(ms(100), ms(20), &idx.starts(0)), ms(80));
        for (ret, fresh) in [(1, false), (2, true), (3, true), (4, true)] {
            let read = r(9, Some(ret), 100, 120);
            assert_eq!(idx.is_fresh(&read, ms(20)).unwrap(), fresh, "write {ret}");
        }
        assert!(!idx.is_fresh(&r(9, None, 100, 120), ms(20)).unwrap());
    }

    // No write in [80, 100]; the last earlier write (1) sets the cutoff, so
    // returning 1 or anything concurrent is fresh.
    #[test]
    fn last_prior_write_case() {
        let writes = [w(0, 10, 12), w(1, 50, 55), w(4, 101, 130), w(5, 105, 140)];
        let idx = WriteIndex::build(&writes);
        assert_eq!(tau_fresh(ms(100), ms(20), &idx.starts(0)), ms(50));
        for (ret, fresh) in [(0, false), (1, true), (4, true), (5, true)] {
            assert_eq!(idx.is_fresh(&r(9, Some(ret), 100, 150), ms(20)).unwrap(), fresh);
        }
    }

    // Nothing written before the read: default and concurrent writes are fresh.
    #[test]
    fn no_prior_write_case() {
        let writes = [w(4, 101, 130), w(5, 105, 140)];
        let idx = WriteIndex::build(&writes);
        assert_eq!(tau_fresh(ms(100), ms(20), &idx.starts(0)), Micros::ZERO);
        for ret in [Some(4), Some(5), None] {
            assert!(idx.is_fresh(&r(9, ret, 100, 150), ms(20)).unwrap());
        }
    }

    #[test]
    fn window_clamps_at_zero() {
        assert_eq!(tau_fresh(ms(5), ms(20), &[ms(1)]), Micros::ZERO);
        assert!(is_t_fresh(ms(5), Micros::ZERO, ms(20), &[ms(1)]));
    }

    #[test]
    fn closed_window_boundaries() {
        assert_eq!(tau_fresh(ms(100), ms(20), &[ms(80)]), ms(80));
        assert_eq!(tau_fresh(ms(100), ms(20), &[ms(100)]), ms(80));
        assert_eq!(tau_fresh(ms(100), ms(20), &[ms(79)]), ms(79));
    }

    #[test]
    fn all_fresh_all_timely() {
        let log = [w(1, 0, 1), r(2, Some(1), 2, 3), w(3, 4, 5), r(4, Some(3), 6, 7)];
        let m = compute_metrics(&log, Micros::ZERO, ms(5)).unwrap();
        assert_eq!((m.p_ic, m.p_ua, m.n_reads), (0.0, 0.0, 2));
    }

    #[test]
    fn latency_exactly_at_deadline_is_not_a_miss() {
        let log = [r(1, None, 10, 160)];
        assert_eq!(compute_metrics(&log, ms(0), ms(150)).unwrap().p_ua, 0.0);
        assert_eq!(compute_metrics(&log, ms(0), ms(149)).unwrap().p_ua, 1.0);
    }

    #[test]
    fn no_reads_is_an_error() {
        assert_eq!(compute_metrics(&[w(1, 0, 1)], ms(0), ms(1)), Err(MetricsError::NoReads));
        assert_eq!(compute_t_visibility(&[], ms(0)), Err(MetricsError::NoReads));
    }

    #[test]
    fn overlapping_write_is_visible_but_stale() {
        let log = [w(1, 0, 5), w(2, 50, 200), r(3, Some(1), 100, 110), w(4, 95, 150), r(5, Some(2), 100, 101)];
        let idx = WriteIndex::build(&log);
        assert!(!idx.is_fresh(&log[4], ms(0)).unwrap());
        assert!(idx.is_visible(&log[4], ms(0)).unwrap());
    }

    #[test]
    fn zero_length_writes_make_visibility_equal_freshness() {
        let mut log = vec![];
        for i in 0..40u64 {
            let t = i * 7;
            if i % 3 == 0 {
                log.push(OpRecord::write(i, i % 2, ms(t), ms(t), 0));
            } else {
                let prior: Vec<u64> = log
                    .iter()
                    .filter(|o: &&OpRecord| !o.is_read() && o.key == i % 2)
                    .map(|o| o.op_id)
                    .collect();
                let ret = prior.get(i as usize % (prior.len() + 1)).copied();
                log.push(OpRecord::read(i, i % 2, ret.map_or(WriteRef::Default, WriteRef::Write), ms(t), ms(t + 1), 0));
            }
        }
        for t in [0, 3, 10, 50] {
            let a = compute_metrics(&log, ms(t), ms(1)).unwrap().p_ic;
            let b = compute_t_visibility(&log, ms(t)).unwrap();
            assert_eq!(a, b, "t = {t}");
        }
    }

    #[test]
    fn csv_row_format() {
        let m = MetricReport { p_ic: 0.25, p_ua: 0.5, n_reads: 4, t_c: ms(0), t_a: ms(1) };
        assert_eq!(m.csv_row(3), "3,4,0.250000,0.500000");
    }

    proptest! {
        #[test]
        fn agrees_with_direct_scan(seed in any::<u64>(), t_c in 0u64..40_000) {
            let log = random_log(seed, 200, 0.5);
            let idx = WriteIndex::build(&log);
            for read in log.iter().filter(|o| o.is_read()) {
                prop_assert_eq!(idx.is_fresh(read, Micros(t_c)).unwrap(), oracle_is_fresh(&log, read, Micros(t_c)));
            }
        }

        #[test]
        fn staleness_monotone_in_freshness_bound(seed in any::<u64>(), a in 0u64..50_000, b in 0u64..50_000) {
            let log = random_log(seed, 150, 0.4);
            let (lo, hi) = (a.min(b), a.max(b));
            let p_lo = compute_metrics(&log, Micros(lo), Micros(lo)).unwrap();
            let p_hi = compute_metrics(&log, Micros(hi), Micros(hi)).unwrap();
            prop_assert!(p_lo.p_ic >= p_hi.p_ic);
            prop_assert!(p_lo.p_ua >= p_hi.p_ua);
        }

        #[test]
        fn write_finish_times_do_not_affect_staleness(seed in any::<u64>(), shift in 0u64..100_000, t_c in 0u64..30_000) {
            let log = random_log(seed, 150, 0.5);
            let moved: Vec<OpRecord> = log
                .iter()
                .map(|o| if o.is_read() { *o } else { OpRecord { finish: o.finish + Micros(shift), ..*o } })
                .collect();
            let a = compute_metrics(&log, Micros(t_c), Micros(1)).unwrap().p_ic;
            let b = compute_metrics(&moved, Micros(t_c), Micros(1)).unwrap().p_ic;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn visibility_never_reports_more_staleness(seed in any::<u64>(), t in 0u64..40_000) {
            let log = random_log(seed, 200, 0.5);
            let vis = compute_t_visibility(&log, Micros(t)).unwrap();
            let fresh = compute_metrics(&log, Micros(t), Micros(0)).unwrap().p_ic;
            prop_assert!(vis <= fresh);
        }

        #[test]
        fn incremental_index_matches_batch(seed in any::<u64>()) {
            let log = random_log(seed, 120, 0.5);
            let batch = WriteIndex::build(&log);
            let mut inc = WriteIndex::default();
            for op in log.iter().rev() {
                inc.insert(op);
            }
            for read in log.iter().filter(|o| o.is_read()) {
                prop_assert_eq!(batch.is_fresh(read, Micros(5_000)), inc.is_fresh(read, Micros(5_000)));
            }
        }
    }
}
