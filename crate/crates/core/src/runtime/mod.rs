//! Execution of worker contexts over a simulated inter-process transport.
//!
//! Two run modes share the same per-worker step:
//!
//! * [`RunMode::Sequential`] is a discrete-event loop on one thread: the worker
//!   with the smallest next-event time steps next, ties broken by a seeded
//!   permutation of worker ids. Runs are bit-reproducible.
//! * [`RunMode::Threaded`] steps all worker contexts concurrently in rounds on
//!   the rayon pool (or one after another without the `parallel` feature).
//!
//! Remote messages pass through the origin process's communication context,
//! a serial resource costing `comm_cost_ns` per message, and then take
//! `alpha + beta * bytes` to arrive.

mod engine;
mod net;

use std::fmt;
use std::str::FromStr;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::metrics::{MetricsShard, RunMetrics, DEFAULT_RESERVOIR};
use crate::schemes::{Aggregator, Inserted, SourceLane};
use crate::topology::{Clock, ClockMode, Item, Payload, Topology, WorkerRef};

use engine::Engine;
use net::{Net, Outbound};

/// Network and communication-context cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportConfig {
    /// Per-message latency.
    pub alpha_ns: f64,
    /// Per-byte cost.
    pub beta_ns_per_byte: f64,
    /// Serial time a message occupies its origin's communication context.
    pub comm_cost_ns: u64,
    pub comm_enabled: bool,
    pub clock: ClockMode,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            alpha_ns: 2000.0,
            beta_ns_per_byte: 0.083,
            comm_cost_ns: 167,
            comm_enabled: true,
            clock: ClockMode::Virtual,
        }
    }
}

impl TransportConfig {
    /// Zero-cost transport without a communication context.
    pub fn free() -> Self {
        TransportConfig {
            alpha_ns: 0.0,
            beta_ns_per_byte: 0.0,
            comm_cost_ns: 0,
            comm_enabled: false,
            clock: ClockMode::Virtual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_ns >= 0.0 && self.alpha_ns.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha_ns)));
        }
        if !(self.beta_ns_per_byte >= 0.0 && self.beta_ns_per_byte.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta must be >= 0, got {}",
                self.beta_ns_per_byte
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunMode {
    Threaded,
    /// Single-context deterministic stepping.
    Sequential { seed: u64 },
}

impl RunMode {
    pub fn token(self) -> &'static str {
        match self {
            RunMode::Threaded => "threaded",
            RunMode::Sequential { .. } => "sequential",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl Serialize for RunMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threaded" => Ok(RunMode::Threaded),
            "sequential" => Ok(RunMode::Sequential { seed: 0 }),
            other => Err(Error::InvalidConfig(format!("unknown run mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub transport: TransportConfig,
    pub mode: RunMode,
    /// Modelled compute charged per item created.
    pub insert_ns: u64,
    /// Modelled compute charged per item delivered.
    pub handle_ns: u64,
    /// Fixed bytes added to every message.
    pub header_bytes: u64,
    pub reservoir_cap: usize,
    pub trace: bool,
    /// Threaded mode: steps per worker per round.
    pub quantum: usize,
    pub timeout: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            transport: TransportConfig::default(),
            mode: RunMode::Sequential { seed: 0 },
            insert_ns: 10,
            handle_ns: 10,
            header_bytes: 0,
            reservoir_cap: DEFAULT_RESERVOIR,
            trace: false,
            quantum: 256,
            timeout: Duration::from_secs(300),
        }
    }
}

/// What a driver did when asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Busy,
    /// Nothing to produce until something is delivered.
    Idle,
}

/// Answer of a driver at a global quiescence point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PhaseVote {
    Done,
    /// Holds deferred work that a later phase will release.
    Pending,
    /// Sent new items during this call.
    Released,
}

/// Per-worker program. The set of drivers doubles as the delivery sink.
pub trait Driver: Send {
    fn produce(&mut self, ctx: &mut WorkerCtx<'_>) -> Result<Activity>;

    /// Handles one item delivered to this worker.
    fn deliver(&mut self, ctx: &mut WorkerCtx<'_>, item: Item) -> Result<()>;

    /// Called on every worker each time the whole run goes quiet.
    fn on_quiescence(&mut self, _ctx: &mut WorkerCtx<'_>) -> Result<PhaseVote> {
        Ok(PhaseVote::Done)
    }
}

/// A worker's view of the runtime while its driver runs.
pub struct WorkerCtx<'a> {
    worker: WorkerRef,
    clock: &'a mut Clock,
    lane: &'a mut SourceLane,
    shard: &'a mut MetricsShard,
    next_seq: &'a mut u64,
    net: &'a Net,
    wakeups: &'a mut Vec<(usize, u64)>,
}

impl WorkerCtx<'_> {
    pub fn worker(&self) -> WorkerRef {
        self.worker
    }

    pub fn topology(&self) -> &Topology {
        self.net.agg.topology()
    }

    pub fn item_size(&self) -> usize {
        self.net.agg.item_size()
    }

    pub fn now(&mut self) -> u64 {
        self.clock.now()
    }

    /// Charges modelled compute time.
    pub fn charge(&mut self, ns: u64) {
        self.clock.advance(ns);
    }

    /// Creates an item for `dest` and hands it to the aggregator. Returns its seq.
    pub fn send(&mut self, dest: WorkerRef, payload: Payload) -> Result<u64> {
        self.clock.advance(self.net.cfg.insert_ns);
        let now = self.clock.now();
        let seq = *self.next_seq;
        let item = Item {
            dest,
            src: self.worker,
            seq,
            created_at: now,
            payload,
        };
        let mut out = Outbound {
            net: self.net,
            shard: self.shard,
            wakeups: self.wakeups,
            now,
        };
        let outcome = self.net.agg.insert(self.lane, item, now, &mut out)?;
        *self.next_seq += 1;
        self.shard.produced += 1;
        if outcome != Inserted::Local {
            self.shard.buffered_items += 1;
        }
        Ok(seq)
    }

    pub fn flush(&mut self) -> Result<usize> {
        let now = self.clock.now();
        let mut out = Outbound {
            net: self.net,
            shard: self.shard,
            wakeups: self.wakeups,
            now,
        };
        self.net.agg.flush(self.lane, now, &mut out)
    }

    /// End-of-stream flush; see [`Aggregator::flush_at_end`].
    pub fn flush_at_end(&mut self) -> Result<usize> {
        let now = self.clock.now();
        let mut out = Outbound {
            net: self.net,
            shard: self.shard,
            wakeups: self.wakeups,
            now,
        };
        self.net.agg.flush_at_end(self.lane, now, &mut out)
    }

    pub fn count_wasted(&mut self, n: u64) {
        self.shard.wasted_updates += n;
    }

    pub fn count_out_of_order(&mut self, n: u64) {
        self.shard.out_of_order_events += n;
    }
}

/// Drivers and metrics of a quiesced run.
#[derive(Debug)]
pub struct Finished<D> {
    pub metrics: RunMetrics,
    pub drivers: Vec<D>,
}

enum HandleState<D> {
    Ready(Box<Engine<D>>),
    Running(JoinHandle<Result<Finished<D>>>),
}

/// A spawned run. Threaded runs execute in the background; sequential runs
/// execute inside [`await_quiescence`](RunHandle::await_quiescence).
pub struct RunHandle<D> {
    worker_contexts: usize,
    comm_contexts: usize,
    state: HandleState<D>,
}

impl<D> fmt::Debug for RunHandle<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunHandle")
            .field("worker_contexts", &self.worker_contexts)
            .field("comm_contexts", &self.comm_contexts)
            .finish_non_exhaustive()
    }
}

/// Starts one context per worker (plus one communication context per process
/// when enabled) running `drivers[worker]`.
pub fn spawn<D: Driver + 'static>(agg: Aggregator, cfg: RuntimeConfig, drivers: Vec<D>) -> Result<RunHandle<D>> {
    cfg.transport.validate()?;
    let topo = *agg.topology();
    if drivers.len() < topo.total_workers() {
        return Err(Error::MissingSink(drivers.len()));
    }
    if drivers.len() > topo.total_workers() {
        return Err(Error::InvalidConfig(format!(
            "{} drivers for {} workers",
            drivers.len(),
            topo.total_workers()
        )));
    }
    if cfg.quantum == 0 {
        return Err(Error::InvalidConfig("quantum must be >= 1".into()));
    }
    if matches!(cfg.mode, RunMode::Sequential { .. }) && cfg.transport.clock == ClockMode::Wall {
        return Err(Error::InvalidConfig(
            "sequential mode runs on virtual time; wall clock needs threaded mode".into(),
        ));
    }
    let worker_contexts = topo.total_workers();
    let comm_contexts = if cfg.transport.comm_enabled {
        topo.total_processes()
    } else {
        0
    };
    let threaded = cfg.mode == RunMode::Threaded;
    let engine = Box::new(Engine::new(agg, cfg, drivers)?);
    let state = if threaded {
        let handle = std::thread::Builder::new()
            .name("nodeagg-run".into())
            .spawn(move || engine.run())
            .map_err(|e| Error::Internal(format!("failed to start run thread: {e}")))?;
        HandleState::Running(handle)
    } else {
        HandleState::Ready(engine)
    };
    Ok(RunHandle {
        worker_contexts,
        comm_contexts,
        state,
    })
}

impl<D: Driver + 'static> RunHandle<D> {
    pub fn worker_contexts(&self) -> usize {
        self.worker_contexts
    }

    pub fn comm_contexts(&self) -> usize {
        self.comm_contexts
    }

    /// Blocks until every item has been delivered, every buffer is empty and
    /// every driver is done.
    pub fn await_quiescence(self) -> Result<Finished<D>> {
        match self.state {
            HandleState::Ready(engine) => engine.run(),
            HandleState::Running(handle) => handle
                .join()
                .map_err(|_| Error::Internal("run thread panicked".into()))?,
        }
    }
}
