//! Message aggregation for fine-grained communication on multi-worker
//! processes, with a simulated runtime to measure it.
//!
//! Items are handed to an [`Aggregator`] which coalesces them into
//! [`CoalescedMessage`]s according to one of four [`SchemeKind`]s. The
//! [`runtime`] steps per-worker [`Driver`]s over a modelled network and the
//! [`costmodel`] predicts what the runtime should measure.

pub mod benchmarks;
pub mod costmodel;
pub mod error;
pub mod metrics;
pub mod runtime;
pub mod schemes;
pub mod sweep;
pub mod topology;

pub use error::{Diagnostics, Error, Result};
pub use metrics::{RunMetrics, RunSummary};
pub use runtime::{spawn, Activity, Driver, Finished, PhaseVote, RunHandle, RunMode, RuntimeConfig, TransportConfig, WorkerCtx};
pub use schemes::{Aggregator, CoalescedMessage, SchemeKind, Transport};
pub use topology::{Clock, ClockMode, Item, NodeRef, Payload, ProcessRef, Topology, WorkerRef};
