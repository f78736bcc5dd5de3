//! The four aggregation schemes.
//!
//! | scheme | buffer owner   | buffer per          | grouping   |
//! |--------|----------------|---------------------|------------|
//! | WW     | source worker  | destination worker  | none       |
//! | WPs    | source worker  | destination process | at receiver|
//! | WsP    | source worker  | destination process | at sender  |
//! | PP     | source process | destination process | at receiver|
//!
//! Worker-owned buffers live in a [`SourceLane`] that only its worker touches.
//! PP buffers live inside the [`Aggregator`] and are filled concurrently by all
//! workers of the owning process.

mod group;
mod shared;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use group::{group_items, GroupingStats};

use crate::error::{Error, Result};
use crate::topology::{Item, ProcessRef, Topology, WorkerRef};
use shared::SharedBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "ww")]
    WW,
    #[serde(rename = "wps")]
    WPs,
    #[serde(rename = "wsp")]
    WsP,
    #[serde(rename = "pp")]
    PP,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [SchemeKind::WW, SchemeKind::WPs, SchemeKind::WsP, SchemeKind::PP];

    pub fn token(self) -> &'static str {
        match self {
            SchemeKind::WW => "ww",
            SchemeKind::WPs => "wps",
            SchemeKind::WsP => "wsp",
            SchemeKind::PP => "pp",
        }
    }

    /// Buffers owned by each source worker.
    pub fn buffers_per_worker(self, topo: &Topology) -> usize {
        match self {
            SchemeKind::WW => topo.total_workers(),
            SchemeKind::WPs | SchemeKind::WsP => topo.total_processes(),
            SchemeKind::PP => 0,
        }
    }

    /// Buffers shared by all workers of each source process.
    pub fn shared_buffers_per_process(self, topo: &Topology) -> usize {
        match self {
            SchemeKind::PP => topo.total_processes(),
            _ => 0,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ww" => Ok(SchemeKind::WW),
            "wps" => Ok(SchemeKind::WPs),
            "wsp" => Ok(SchemeKind::WsP),
            "pp" => Ok(SchemeKind::PP),
            _ => Err(Error::InvalidConfig(format!(
                "unknown scheme `{s}` (expected ww|wps|wsp|pp)"
            ))),
        }
    }
}

/// Destination of a coalesced message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Worker(WorkerRef),
    Process(ProcessRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Full,
    Flush,
}

/// Items split by destination worker.
pub type Batches = Vec<(WorkerRef, Vec<Item>)>;

/// The on-the-wire unit produced by an aggregator.
#[derive(Debug, Clone)]
pub struct CoalescedMessage {
    pub origin: ProcessRef,
    /// Worker whose call emitted the message.
    pub emitter: WorkerRef,
    pub dest_scope: Scope,
    pub items: Vec<Item>,
    /// Items are contiguous by destination worker.
    pub grouped: bool,
    pub cause: Cause,
    pub sent_at: u64,
    /// Dequeued ahead of ordinary traffic at the receiver.
    pub priority: bool,
}

impl CoalescedMessage {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dest_process(&self, topo: &Topology) -> ProcessRef {
        match self.dest_scope {
            Scope::Worker(w) => topo.process_of_unchecked(w),
            Scope::Process(p) => p,
        }
    }
}

/// Where an aggregator hands its output.
pub trait Transport {
    /// A coalesced message leaving the origin process.
    fn send_remote(&mut self, msg: CoalescedMessage) -> Result<()>;
    /// Items for a worker of the caller's own process.
    fn deliver_local(&mut self, dest: WorkerRef, items: Vec<Item>) -> Result<()>;
}

/// Optional automatic flushing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AutoFlush {
    /// Flush the caller's scope whenever its worker runs out of work.
    pub on_idle: bool,
    /// Flush buffers whose first item is older than this.
    pub timeout_ns: Option<u64>,
}

/// What happened to an inserted item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inserted {
    /// Same-process destination: bypassed the buffers.
    Local,
    Buffered,
    /// Buffered and the buffer went out as a full message.
    SentFull,
}

#[derive(Debug)]
struct LocalBuffer {
    dest: Scope,
    items: Vec<Item>,
    opened_at: Option<u64>,
}

/// Worker-owned buffers of one source worker.
#[derive(Debug)]
pub struct SourceLane {
    source: WorkerRef,
    process: ProcessRef,
    buffers: Vec<LocalBuffer>,
    pending: usize,
}

impl SourceLane {
    pub fn source(&self) -> WorkerRef {
        self.source
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.len()
    }

    /// Items currently held in this lane's own buffers.
    pub fn pending(&self) -> usize {
        self.pending
    }
}

/// Counts of allocated buffers and their byte footprint (`slots * item_size`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Footprint {
    pub buffers_per_worker: usize,
    pub shared_buffers_per_process: usize,
    /// `None` when no buffer is owned by a single core.
    pub per_core_bytes: Option<u64>,
    pub per_process_bytes: u64,
}

/// Shared state of one aggregation instance.
pub struct Aggregator {
    kind: SchemeKind,
    topo: Topology,
    capacity: usize,
    item_size: usize,
    auto_flush: AutoFlush,
    priority: bool,
    /// PP only: indexed `src_process * N + dest_process`.
    shared: Vec<SharedBuffer>,
    /// PP only: end-of-stream votes per process.
    end_votes: Vec<AtomicUsize>,
}

impl fmt::Debug for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Aggregator")
            .field("kind", &self.kind)
            .field("topo", &self.topo)
            .field("capacity", &self.capacity)
            .field("item_size", &self.item_size)
            .finish_non_exhaustive()
    }
}

impl Aggregator {
    /// `capacity` is `g` (items per buffer), `item_size` is `m` (bytes per item).
    pub fn new(kind: SchemeKind, topo: Topology, capacity: usize, item_size: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("buffer capacity g must be >= 1".into()));
        }
        if item_size == 0 {
            return Err(Error::InvalidConfig("item size m must be >= 1".into()));
        }
        let n = topo.total_processes();
        let shared = if kind == SchemeKind::PP {
            (0..n * n).map(|_| SharedBuffer::new(capacity)).collect()
        } else {
            Vec::new()
        };
        let end_votes = if kind == SchemeKind::PP {
            (0..n).map(|_| AtomicUsize::new(0)).collect()
        } else {
            Vec::new()
        };
        Ok(Aggregator {
            kind,
            topo,
            capacity,
            item_size,
            auto_flush: AutoFlush::default(),
            priority: true,
            shared,
            end_votes,
        })
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn item_size(&self) -> usize {
        self.item_size
    }

    pub fn auto_flush(&self) -> AutoFlush {
        self.auto_flush
    }

    pub fn set_auto_flush(&mut self, on_idle: bool, timeout_ns: Option<u64>) {
        self.auto_flush = AutoFlush { on_idle, timeout_ns };
    }

    /// Whether emitted messages carry the expedited flag.
    pub fn set_priority(&mut self, priority: bool) {
        self.priority = priority;
    }

    /// Allocates the worker-owned buffers of `source`.
    pub fn lane(&self, source: WorkerRef) -> Result<SourceLane> {
        let process = self.topo.process_of(source)?;
        let buffers = match self.kind {
            SchemeKind::WW => (0..self.topo.total_workers())
                .map(|w| LocalBuffer {
                    dest: Scope::Worker(WorkerRef(w)),
                    items: Vec::new(),
                    opened_at: None,
                })
                .collect(),
            SchemeKind::WPs | SchemeKind::WsP => (0..self.topo.total_processes())
                .map(|p| LocalBuffer {
                    dest: Scope::Process(ProcessRef(p)),
                    items: Vec::new(),
                    opened_at: None,
                })
                .collect(),
            SchemeKind::PP => Vec::new(),
        };
        Ok(SourceLane {
            source,
            process,
            buffers,
            pending: 0,
        })
    }

    /// Buffer counts and byte footprint of the allocation for `lanes`.
    ///
    /// Per-process bytes are measured on process 0.
    pub fn footprint(&self, lanes: &[SourceLane]) -> Footprint {
        let slot_bytes = (self.capacity * self.item_size) as u64;
        let buffers_per_worker = lanes.first().map_or(0, |l| l.buffers.len());
        let shared_per_process = if self.kind == SchemeKind::PP {
            self.topo.total_processes()
        } else {
            0
        };
        let local_bytes: u64 = lanes
            .iter()
            .filter(|l| l.process == ProcessRef(0))
            .map(|l| l.buffers.len() as u64 * slot_bytes)
            .sum();
        let shared_bytes: u64 = self.shared[..shared_per_process]
            .iter()
            .map(|b| (b.capacity() * self.item_size) as u64)
            .sum();
        Footprint {
            buffers_per_worker,
            shared_buffers_per_process: shared_per_process,
            per_core_bytes: (buffers_per_worker > 0).then_some(buffers_per_worker as u64 * slot_bytes),
            per_process_bytes: local_bytes + shared_bytes,
        }
    }

    fn shared_buffer(&self, src: ProcessRef, dest: ProcessRef) -> &SharedBuffer {
        &self.shared[src.0 * self.topo.total_processes() + dest.0]
    }

    fn shared_row(&self, src: ProcessRef) -> &[SharedBuffer] {
        let n = self.topo.total_processes();
        &self.shared[src.0 * n..(src.0 + 1) * n]
    }

    /// Routes `item` from the lane's worker.
    pub fn insert(
        &self,
        lane: &mut SourceLane,
        item: Item,
        now: u64,
        tx: &mut dyn Transport,
    ) -> Result<Inserted> {
        self.topo.check_worker(item.dest)?;
        if item.payload.len() != self.item_size {
            return Err(Error::PayloadSize {
                expected: self.item_size,
                got: item.payload.len(),
            });
        }
        if self.topo.same_process(lane.source, item.dest) {
            tx.deliver_local(item.dest, vec![item])?;
            return Ok(Inserted::Local);
        }
        let dest_process = self.topo.process_of_unchecked(item.dest);
        if self.kind == SchemeKind::PP {
            return match self.shared_buffer(lane.process, dest_process).insert(item, now) {
                Some(batch) => {
                    self.emit(lane, Scope::Process(dest_process), batch, Cause::Full, now, tx)?;
                    Ok(Inserted::SentFull)
                }
                None => Ok(Inserted::Buffered),
            };
        }
        let idx = match self.kind {
            SchemeKind::WW => item.dest.0,
            _ => dest_process.0,
        };
        let buf = &mut lane.buffers[idx];
        if buf.items.is_empty() {
            buf.opened_at = Some(now);
            buf.items.reserve(self.capacity.min(64));
        }
        buf.items.push(item);
        lane.pending += 1;
        if buf.items.len() == self.capacity {
            let batch = std::mem::take(&mut buf.items);
            let scope = buf.dest;
            buf.opened_at = None;
            lane.pending -= batch.len();
            self.emit(lane, scope, batch, Cause::Full, now, tx)?;
            Ok(Inserted::SentFull)
        } else {
            Ok(Inserted::Buffered)
        }
    }

    /// Sends every non-empty buffer in the caller's scope as a resized message.
    ///
    /// For PP the scope is the shared buffers of the caller's process.
    pub fn flush(&self, lane: &mut SourceLane, now: u64, tx: &mut dyn Transport) -> Result<usize> {
        self.flush_where(lane, now, tx, |_| true)
    }

    /// End-of-stream flush. Same as [`flush`](Self::flush) except for PP, where
    /// the shared buffers are flushed once the last worker of the process has
    /// called this.
    pub fn flush_at_end(&self, lane: &mut SourceLane, now: u64, tx: &mut dyn Transport) -> Result<usize> {
        if self.kind != SchemeKind::PP {
            return self.flush(lane, now, tx);
        }
        let t = self.topo.workers_per_proc();
        let votes = &self.end_votes[lane.process.0];
        if votes.fetch_add(1, Ordering::AcqRel) + 1 == t {
            votes.store(0, Ordering::Release);
            self.flush(lane, now, tx)
        } else {
            Ok(0)
        }
    }

    /// Flushes buffers in the caller's scope whose first item is older than the timeout.
    pub fn flush_expired(&self, lane: &mut SourceLane, now: u64, tx: &mut dyn Transport) -> Result<usize> {
        match self.auto_flush.timeout_ns {
            Some(timeout) => self.flush_where(lane, now, tx, |opened| opened.saturating_add(timeout) <= now),
            None => Ok(0),
        }
    }

    /// Earliest time a buffer in the caller's scope hits the flush timeout.
    pub fn next_deadline(&self, lane: &SourceLane) -> Option<u64> {
        let timeout = self.auto_flush.timeout_ns?;
        let opened = if self.kind == SchemeKind::PP {
            self.shared_row(lane.process).iter().filter_map(|b| b.opened_at()).min()
        } else if lane.pending == 0 {
            None
        } else {
            lane.buffers.iter().filter_map(|b| b.opened_at).min()
        };
        opened.map(|t| t.saturating_add(timeout))
    }

    fn flush_where(
        &self,
        lane: &mut SourceLane,
        now: u64,
        tx: &mut dyn Transport,
        due: impl Fn(u64) -> bool,
    ) -> Result<usize> {
        let mut sent = 0;
        if self.kind == SchemeKind::PP {
            for (dest, buf) in self.shared_row(lane.process).iter().enumerate() {
                if !buf.opened_at().is_some_and(&due) {
                    continue;
                }
                if let Some(batch) = buf.seal_for_flush() {
                    self.emit(lane, Scope::Process(ProcessRef(dest)), batch, Cause::Flush, now, tx)?;
                    sent += 1;
                }
            }
            return Ok(sent);
        }
        if lane.pending == 0 {
            return Ok(0);
        }
        for idx in 0..lane.buffers.len() {
            let buf = &mut lane.buffers[idx];
            if buf.items.is_empty() || !buf.opened_at.is_some_and(&due) {
                continue;
            }
            let batch = std::mem::take(&mut buf.items);
            let scope = buf.dest;
            buf.opened_at = None;
            lane.pending -= batch.len();
            self.emit(lane, scope, batch, Cause::Flush, now, tx)?;
            sent += 1;
        }
        Ok(sent)
    }

    fn emit(
        &self,
        lane: &SourceLane,
        dest_scope: Scope,
        items: Vec<Item>,
        cause: Cause,
        now: u64,
        tx: &mut dyn Transport,
    ) -> Result<()> {
        // A shared buffer can be completed by a worker whose clock trails the
        // other inserters; the message cannot leave before its newest item.
        let sent_at = items.iter().map(|i| i.created_at).fold(now, u64::max);
        let (items, grouped) = match self.kind {
            SchemeKind::WW => (items, true),
            SchemeKind::WsP => (group_items(items, &self.topo)?.0, true),
            SchemeKind::WPs | SchemeKind::PP => (items, false),
        };
        tx.send_remote(CoalescedMessage {
            origin: lane.process,
            emitter: lane.source,
            dest_scope,
            items,
            grouped,
            cause,
            sent_at,
            priority: self.priority,
        })
    }

    /// Receive-side handling: splits a message into per-worker batches.
    ///
    /// Returns the batches and the grouping work performed.
    pub fn on_receive(&self, msg: CoalescedMessage) -> Result<(Batches, GroupingStats)> {
        match (self.kind, msg.dest_scope) {
            (SchemeKind::WW, Scope::Worker(dest)) => {
                if let Some(bad) = msg.items.iter().find(|i| i.dest != dest) {
                    return Err(Error::Internal(format!(
                        "item for worker {} inside message for worker {dest}",
                        bad.dest
                    )));
                }
                Ok((vec![(dest, msg.items)], GroupingStats::default()))
            }
            (SchemeKind::WPs | SchemeKind::PP, Scope::Process(p)) => {
                if let Some(bad) = msg.items.iter().find(|i| self.topo.process_of_unchecked(i.dest) != p) {
                    return Err(Error::Internal(format!(
                        "item for worker {} inside message for process {p}",
                        bad.dest
                    )));
                }
                let (grouped, stats) = group_items(msg.items, &self.topo)?;
                Ok((group::split_runs(grouped, &self.topo, p)?, stats))
            }
            (SchemeKind::WsP, Scope::Process(p)) => {
                if !msg.grouped {
                    return Err(Error::Internal("WsP message arrived ungrouped".into()));
                }
                Ok((group::split_runs(msg.items, &self.topo, p)?, GroupingStats::default()))
            }
            (kind, scope) => Err(Error::Internal(format!(
                "{kind} aggregator received message addressed to {scope:?}"
            ))),
        }
    }

    /// Items held in the shared buffers of `process` (PP only).
    pub fn shared_fill(&self, process: ProcessRef) -> usize {
        if self.kind != SchemeKind::PP {
            return 0;
        }
        self.shared_row(process).iter().map(|b| b.fill()).sum()
    }

    /// Total items held in all process-shared buffers.
    pub fn shared_pending(&self) -> usize {
        self.shared.iter().map(|b| b.fill()).sum()
    }

    /// Sealed generations of the PP buffer from `src` to `dest`.
    pub fn shared_generation(&self, src: ProcessRef, dest: ProcessRef) -> u64 {
        if self.kind != SchemeKind::PP {
            return 0;
        }
        self.shared_buffer(src, dest).generation()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Payload;
    use std::sync::{Arc, Barrier};

    #[derive(Default)]
    struct Capture {
        remote: Vec<CoalescedMessage>,
        local: Vec<(WorkerRef, Vec<Item>)>,
    }

    impl Transport for Capture {
        fn send_remote(&mut self, msg: CoalescedMessage) -> Result<()> {
            self.remote.push(msg);
            Ok(())
        }

        fn deliver_local(&mut self, dest: WorkerRef, items: Vec<Item>) -> Result<()> {
            self.local.push((dest, items));
            Ok(())
        }
    }

    fn item(src: usize, dest: usize, seq: u64) -> Item {
        Item {
            dest: WorkerRef(dest),
            src: WorkerRef(src),
            seq,
            created_at: 0,
            payload: Payload::from_words(&[seq]),
        }
    }

    fn topo(n: usize, p: usize, t: usize) -> Topology {
        Topology::new(n, p, t).unwrap()
    }

    #[test]
    fn scheme_tokens() {
        for kind in SchemeKind::ALL {
            assert_eq!(kind.token().parse::<SchemeKind>().unwrap(), kind);
        }
        assert!("xx".parse::<SchemeKind>().unwrap_err().is_usage());
    }

    #[test]
    fn layout_counts() {
        let t = topo(1, 2, 4);
        let ww = Aggregator::new(SchemeKind::WW, t, 4, 8).unwrap();
        assert_eq!(ww.lane(WorkerRef(3)).unwrap().buffer_count(), 8);

        let t = topo(2, 2, 2);
        let wps = Aggregator::new(SchemeKind::WPs, t, 16, 8).unwrap();
        assert_eq!(wps.lane(WorkerRef(0)).unwrap().buffer_count(), 4);

        let pp = Aggregator::new(SchemeKind::PP, t, 16, 8).unwrap();
        let lanes: Vec<_> = (0..8).map(|w| pp.lane(WorkerRef(w)).unwrap()).collect();
        let fp = pp.footprint(&lanes);
        assert_eq!(fp.shared_buffers_per_process, 4);
        assert_eq!(fp.shared_buffers_per_process * t.total_processes(), 16);
        assert_eq!(fp.per_core_bytes, None);
    }

    #[test]
    fn zero_capacity_or_size_rejected() {
        assert!(Aggregator::new(SchemeKind::WW, topo(1, 1, 1), 0, 8).unwrap_err().is_usage());
        assert!(Aggregator::new(SchemeKind::WW, topo(1, 1, 1), 8, 0).unwrap_err().is_usage());
    }

    #[test]
    fn full_trigger_sends_once() {
        let agg = Aggregator::new(SchemeKind::WW, topo(1, 2, 1), 2, 8).unwrap();
        let mut lane = agg.lane(WorkerRef(0)).unwrap();
        let mut tx = Capture::default();
        assert_eq!(agg.insert(&mut lane, item(0, 1, 0), 0, &mut tx).unwrap(), Inserted::Buffered);
        assert_eq!(agg.insert(&mut lane, item(0, 1, 1), 0, &mut tx).unwrap(), Inserted::SentFull);
        assert_eq!(tx.remote.len(), 1);
        assert_eq!(tx.remote[0].len(), 2);
        assert_eq!(tx.remote[0].cause, Cause::Full);
        assert_eq!(lane.pending(), 0);
    }

    #[test]
    fn starved_buffer_sends_nothing_without_flush() {
        let agg = Aggregator::new(SchemeKind::WPs, topo(1, 2, 1), 1024, 8).unwrap();
        let mut lane = agg.lane(WorkerRef(0)).unwrap();
        let mut tx = Capture::default();
        for s in 0..500 {
            agg.insert(&mut lane, item(0, 1, s), 0, &mut tx).unwrap();
        }
        assert!(tx.remote.is_empty());
        assert_eq!(lane.pending(), 500);
    }

    #[test]
    fn flush_resizes_and_counts() {
        let agg = Aggregator::new(SchemeKind::WW, topo(1, 3, 1), 8, 8).unwrap();
        let mut lane = agg.lane(WorkerRef(0)).unwrap();
        let mut tx = Capture::default();
        assert_eq!(agg.flush(&mut lane, 0, &mut tx).unwrap(), 0);
        agg.insert(&mut lane, item(0, 1, 0), 0, &mut tx).unwrap();
        agg.insert(&mut lane, item(0, 2, 1), 0, &mut tx).unwrap();
        agg.insert(&mut lane, item(0, 2, 2), 0, &mut tx).unwrap();
        assert_eq!(agg.flush(&mut lane, 3, &mut tx).unwrap(), 2);
        let sizes: Vec<_> = tx.remote.iter().map(|m| (m.len(), m.cause, m.sent_at)).collect();
        assert_eq!(sizes, vec![(1, Cause::Flush, 3), (2, Cause::Flush, 3)]);
        assert_eq!(agg.flush(&mut lane, 4, &mut tx).unwrap(), 0);
    }

    #[test]
    fn self_process_items_bypass_buffers() {
        let agg = Aggregator::new(SchemeKind::WW, topo(1, 2, 2), 4, 8).unwrap();
        let mut lane = agg.lane(WorkerRef(0)).unwrap();
        let mut tx = Capture::default();
        assert_eq!(agg.insert(&mut lane, item(0, 1, 0), 0, &mut tx).unwrap(), Inserted::Local);
        assert_eq!(agg.insert(&mut lane, item(0, 0, 1), 0, &mut tx).unwrap(), Inserted::Local);
        assert!(tx.remote.is_empty());
        assert_eq!(tx.local.len(), 2);
    }

    #[test]
    fn bad_destination_and_payload() {
        let agg = Aggregator::new(SchemeKind::WPs, topo(1, 2, 2), 4, 8).unwrap();
        let mut lane = agg.lane(WorkerRef(0)).unwrap();
        let mut tx = Capture::default();
        assert!(matches!(
            agg.insert(&mut lane, item(0, 9, 0), 0, &mut tx),
            Err(Error::WorkerOutOfRange { .. })
        ));
        let mut wide = item(0, 2, 0);
        wide.payload = Payload::zeroed(12);
        assert!(matches!(
            agg.insert(&mut lane, wide, 0, &mut tx),
            Err(Error::PayloadSize { expected: 8, got: 12 })
        ));
    }

    #[test]
    fn receive_paths() {
        let t = topo(1, 2, 2);
        // WW: one worker
        let ww = Aggregator::new(SchemeKind::WW, t, 3, 8).unwrap();
        let mut lane = ww.lane(WorkerRef(0)).unwrap();
        let mut tx = Capture::default();
        for s in 0..3 {
            ww.insert(&mut lane, item(0, 3, s), 0, &mut tx).unwrap();
        }
        let (batches, _) = ww.on_receive(tx.remote.pop().unwrap()).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].1.len(), 3);

        // WPs: grouped at the receiver
        let wps = Aggregator::new(SchemeKind::WPs, t, 3, 8).unwrap();
        let mut lane = wps.lane(WorkerRef(0)).unwrap();
        for (s, d) in [3, 2, 3].into_iter().enumerate() {
            wps.insert(&mut lane, item(0, d, s as u64), 0, &mut tx).unwrap();
        }
        let msg = tx.remote.pop().unwrap();
        assert!(!msg.grouped);
        let (batches, stats) = wps.on_receive(msg).unwrap();
        assert_eq!(stats.total(), 3 + 2);
        let shape: Vec<_> = batches.iter().map(|(w, b)| (w.0, b.len())).collect();
        assert_eq!(shape, vec![(2, 1), (3, 2)]);

        // WsP: grouped at the sender
        let wsp = Aggregator::new(SchemeKind::WsP, t, 3, 8).unwrap();
        let mut lane = wsp.lane(WorkerRef(0)).unwrap();
        for (s, d) in [3, 2, 3].into_iter().enumerate() {
            wsp.insert(&mut lane, item(0, d, s as u64), 0, &mut tx).unwrap();
        }
        let msg = tx.remote.pop().unwrap();
        assert!(msg.grouped);
        assert_eq!(msg.items.iter().map(|i| i.dest.0).collect::<Vec<_>>(), vec![2, 3, 3]);
        let (batches, stats) = wsp.on_receive(msg).unwrap();
        assert_eq!(stats.total(), 0);
        assert_eq!(batches.len(), 2);
    }

    #[test]
    fn misrouted_message_is_internal_error() {
        let t = topo(1, 2, 2);
        let wps = Aggregator::new(SchemeKind::WPs, t, 3, 8).unwrap();
        let msg = CoalescedMessage {
            origin: ProcessRef(0),
            emitter: WorkerRef(0),
            dest_scope: Scope::Process(ProcessRef(1)),
            items: vec![item(0, 0, 0)],
            grouped: false,
            cause: Cause::Flush,
            sent_at: 0,
            priority: true,
        };
        assert!(matches!(wps.on_receive(msg), Err(Error::Internal(_))));
    }

    #[test]
    fn pp_end_flush_waits_for_all_local_workers() {
        let t = topo(1, 2, 2);
        let pp = Aggregator::new(SchemeKind::PP, t, 8, 8).unwrap();
        let mut a = pp.lane(WorkerRef(0)).unwrap();
        let mut b = pp.lane(WorkerRef(1)).unwrap();
        let mut tx = Capture::default();
        pp.insert(&mut a, item(0, 2, 0), 0, &mut tx).unwrap();
        pp.insert(&mut b, item(1, 3, 0), 0, &mut tx).unwrap();
        assert_eq!(pp.shared_fill(ProcessRef(0)), 2);
        assert_eq!(pp.flush_at_end(&mut a, 0, &mut tx).unwrap(), 0);
        assert_eq!(pp.flush_at_end(&mut b, 0, &mut tx).unwrap(), 1);
        assert_eq!(tx.remote[0].len(), 2);
        assert_eq!(pp.shared_pending(), 0);
    }

    #[test]
    fn timeout_flush() {
        let mut agg = Aggregator::new(SchemeKind::WPs, topo(1, 2, 1), 8, 8).unwrap();
        agg.set_auto_flush(false, Some(1_000_000));
        let mut lane = agg.lane(WorkerRef(0)).unwrap();
        let mut tx = Capture::default();
        agg.insert(&mut lane, item(0, 1, 0), 100, &mut tx).unwrap();
        assert_eq!(agg.next_deadline(&lane), Some(1_000_100));
        assert_eq!(agg.flush_expired(&mut lane, 500_000, &mut tx).unwrap(), 0);
        assert_eq!(agg.flush_expired(&mut lane, 1_000_100, &mut tx).unwrap(), 1);
        assert_eq!(tx.remote[0].cause, Cause::Flush);
        assert_eq!(agg.next_deadline(&lane), None);
    }

    #[test]
    fn pp_concurrent_fill_emits_one_full_message() {
        // 4 workers of process 0 race one item each into the shared buffer for process 1.
        let t = topo(1, 2, 4);
        for _ in 0..500 {
            let pp = Arc::new(Aggregator::new(SchemeKind::PP, t, 4, 8).unwrap());
            let barrier = Arc::new(Barrier::new(4));
            let handles: Vec<_> = (0..4)
                .map(|w| {
                    let pp = Arc::clone(&pp);
                    let barrier = Arc::clone(&barrier);
                    std::thread::spawn(move || {
                        let mut lane = pp.lane(WorkerRef(w)).unwrap();
                        let mut tx = Capture::default();
                        barrier.wait();
                        pp.insert(&mut lane, item(w, 4 + w, 0), 0, &mut tx).unwrap();
                        tx.remote
                    })
                })
                .collect();
            let msgs: Vec<CoalescedMessage> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
            assert_eq!(msgs.len(), 1);
            assert_eq!(msgs[0].len(), 4);
            assert_eq!(msgs[0].cause, Cause::Full);
            let mut srcs: Vec<_> = msgs[0].items.iter().map(|i| i.src.0).collect();
            srcs.sort_unstable();
            assert_eq!(srcs, vec![0, 1, 2, 3]);
            assert_eq!(pp.shared_generation(ProcessRef(0), ProcessRef(1)), 1);
        }
    }
}
