//! Node / process / worker hierarchy, item type and clocks.
//!
//! Workers are numbered densely in row-major order: worker `u` belongs to
//! process `u / workers_per_proc`, and process `p` belongs to node
//! `p / procs_per_node`.

use std::fmt;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

macro_rules! index_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(&self.0, f)
            }
        }
    };
}

index_newtype!(
    /// Global zero-based worker index.
    WorkerRef
);
index_newtype!(
    /// Global zero-based process index.
    ProcessRef
);
index_newtype!(
    /// Global zero-based node index.
    NodeRef
);

/// Shape of the machine: `nodes x procs_per_node x workers_per_proc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    #[serde(rename = "nodes")]
    num_nodes: usize,
    #[serde(rename = "ppn")]
    procs_per_node: usize,
    #[serde(rename = "wpp")]
    workers_per_proc: usize,
}

impl Topology {
    pub fn new(num_nodes: usize, procs_per_node: usize, workers_per_proc: usize) -> Result<Self> {
        if num_nodes == 0 || procs_per_node == 0 || workers_per_proc == 0 {
            return Err(Error::InvalidTopology(format!(
                "all of nodes/ppn/wpp must be >= 1, got {num_nodes}x{procs_per_node}x{workers_per_proc}"
            )));
        }
        num_nodes
            .checked_mul(procs_per_node)
            .and_then(|n| n.checked_mul(workers_per_proc))
            .ok_or_else(|| Error::InvalidTopology("worker count overflows".into()))?;
        Ok(Topology {
            num_nodes,
            procs_per_node,
            workers_per_proc,
        })
    }

    /// Parses the JSON config object `{"nodes":..,"ppn":..,"wpp":..}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Topology = serde_json::from_str(text)
            .map_err(|e| Error::InvalidTopology(format!("bad topology json: {e}")))?;
        Topology::new(raw.num_nodes, raw.procs_per_node, raw.workers_per_proc)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn procs_per_node(&self) -> usize {
        self.procs_per_node
    }

    /// Workers per process (`t`).
    pub fn workers_per_proc(&self) -> usize {
        self.workers_per_proc
    }

    /// Total processes (`N`).
    pub fn total_processes(&self) -> usize {
        self.num_nodes * self.procs_per_node
    }

    /// Total workers (`w = N * t`).
    pub fn total_workers(&self) -> usize {
        self.total_processes() * self.workers_per_proc
    }

    pub fn check_worker(&self, worker: WorkerRef) -> Result<()> {
        if worker.0 < self.total_workers() {
            Ok(())
        } else {
            Err(Error::WorkerOutOfRange {
                worker: worker.0,
                total: self.total_workers(),
            })
        }
    }

    pub fn check_process(&self, process: ProcessRef) -> Result<()> {
        if process.0 < self.total_processes() {
            Ok(())
        } else {
            Err(Error::ProcessOutOfRange {
                process: process.0,
                total: self.total_processes(),
            })
        }
    }

    pub fn process_of(&self, worker: WorkerRef) -> Result<ProcessRef> {
        self.check_worker(worker)?;
        Ok(self.process_of_unchecked(worker))
    }

    #[inline]
    pub(crate) fn process_of_unchecked(&self, worker: WorkerRef) -> ProcessRef {
        ProcessRef(worker.0 / self.workers_per_proc)
    }

    pub fn node_of(&self, process: ProcessRef) -> Result<NodeRef> {
        self.check_process(process)?;
        Ok(NodeRef(process.0 / self.procs_per_node))
    }

    pub fn workers_of(&self, process: ProcessRef) -> Result<Range<usize>> {
        self.check_process(process)?;
        Ok(self.workers_of_unchecked(process))
    }

    #[inline]
    pub(crate) fn workers_of_unchecked(&self, process: ProcessRef) -> Range<usize> {
        let t = self.workers_per_proc;
        process.0 * t..(process.0 + 1) * t
    }

    pub fn processes_of(&self, node: NodeRef) -> Result<Range<usize>> {
        if node.0 >= self.num_nodes {
            return Err(Error::InvalidTopology(format!(
                "node {node} out of range ({} nodes)",
                self.num_nodes
            )));
        }
        let p = self.procs_per_node;
        Ok(node.0 * p..(node.0 + 1) * p)
    }

    /// Rank of `worker` inside its process.
    #[inline]
    pub fn local_rank(&self, worker: WorkerRef) -> usize {
        worker.0 % self.workers_per_proc
    }

    #[inline]
    pub fn same_process(&self, a: WorkerRef, b: WorkerRef) -> bool {
        a.0 / self.workers_per_proc == b.0 / self.workers_per_proc
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}",
            self.num_nodes, self.procs_per_node, self.workers_per_proc
        )
    }
}

/// Opaque item payload of the run-wide item size.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Payload(SmallVec<[u8; 16]>);

impl Payload {
    pub fn zeroed(len: usize) -> Self {
        Payload(SmallVec::from_elem(0, len))
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Payload(SmallVec::from_slice(bytes))
    }

    /// Little-endian packing of `words`, 8 bytes each.
    pub fn from_words(words: &[u64]) -> Self {
        let mut v = SmallVec::with_capacity(words.len() * 8);
        for w in words {
            v.extend_from_slice(&w.to_le_bytes());
        }
        Payload(v)
    }

    /// Reads the `i`-th little-endian u64. Panics if the payload is too short.
    pub fn word(&self, i: usize) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[i * 8..i * 8 + 8]);
        u64::from_le_bytes(b)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

/// An application-level short message handed to the aggregation library.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Item {
    pub dest: WorkerRef,
    pub src: WorkerRef,
    /// Unique, monotone per source worker.
    pub seq: u64,
    /// Creation timestamp in ns.
    pub created_at: u64,
    pub payload: Payload,
}

/// How timestamps are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Real elapsed time since the run started.
    Wall,
    /// Logical time advanced explicitly by modelled costs.
    #[default]
    Virtual,
}

impl std::str::FromStr for ClockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(ClockMode::Wall),
            "virtual" => Ok(ClockMode::Virtual),
            other => Err(Error::InvalidConfig(format!("unknown clock mode `{other}`"))),
        }
    }
}

/// Per-context clock. Readings never decrease.
#[derive(Debug, Clone)]
pub struct Clock {
    origin: Option<Instant>,
    logical: u64,
}

impl Clock {
    pub fn new(mode: ClockMode, origin: Instant) -> Self {
        Clock {
            origin: (mode == ClockMode::Wall).then_some(origin),
            logical: 0,
        }
    }

    pub fn virtual_clock() -> Self {
        Clock {
            origin: None,
            logical: 0,
        }
    }

    pub fn mode(&self) -> ClockMode {
        if self.origin.is_some() {
            ClockMode::Wall
        } else {
            ClockMode::Virtual
        }
    }

    #[inline]
    pub fn now(&mut self) -> u64 {
        if let Some(origin) = self.origin {
            let t = origin.elapsed().as_nanos() as u64;
            self.logical = self.logical.max(t);
        }
        self.logical
    }

    /// Charges `ns` of modelled work. No-op for wall clocks.
    #[inline]
    pub fn advance(&mut self, ns: u64) {
        if self.origin.is_none() {
            self.logical += ns;
        }
    }

    /// Moves logical time forward to `t` if it is behind.
    #[inline]
    pub fn advance_to(&mut self, t: u64) {
        if self.origin.is_none() && t > self.logical {
            self.logical = t;
        }
    }
}
