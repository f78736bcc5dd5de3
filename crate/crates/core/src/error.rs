use std::fmt;

use serde::Serialize;

/// Errors raised by the aggregation library, the runtime and the workload drivers.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("worker {worker} out of range (total workers {total})")]
    WorkerOutOfRange { worker: usize, total: usize },

    #[error("process {process} out of range (total processes {total})")]
    ProcessOutOfRange { process: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("payload is {got} bytes but the run-wide item size is {expected}")]
    PayloadSize { expected: usize, got: usize },

    #[error("batch spans destination processes {first} and {second}")]
    MixedDestinations { first: usize, second: usize },

    #[error("no delivery handler registered for worker {0}")]
    MissingSink(usize),

    #[error("metrics summarized before the run quiesced")]
    NotQuiesced,

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),

    #[error("run did not quiesce within {limit_ms} ms\n{diagnostics}")]
    Timeout {
        limit_ms: u64,
        diagnostics: Diagnostics,
    },
}

impl Error {
    /// True for errors caused by bad caller input rather than a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidTopology(_)
                | Error::WorkerOutOfRange { .. }
                | Error::ProcessOutOfRange { .. }
                | Error::InvalidConfig(_)
                | Error::PayloadSize { .. }
                | Error::MixedDestinations { .. }
                | Error::MissingSink(_)
                | Error::NotQuiesced
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Snapshot of buffered state taken when a run fails to quiesce.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub produced: u64,
    pub delivered: u64,
    /// (worker, buffered items in worker-owned buffers)
    pub lane_fills: Vec<(usize, usize)>,
    /// (process, buffered items in process-shared buffers)
    pub shared_fills: Vec<(usize, usize)>,
    /// (worker, pending delivery batches)
    pub queue_depths: Vec<(usize, usize)>,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "produced={} delivered={}", self.produced, self.delivered)?;
        for (w, n) in self.lane_fills.iter().filter(|(_, n)| *n > 0) {
            writeln!(f, "  worker {w}: {n} items buffered")?;
        }
        for (p, n) in self.shared_fills.iter().filter(|(_, n)| *n > 0) {
            writeln!(f, "  process {p}: {n} items in shared buffers")?;
        }
        for (w, n) in self.queue_depths.iter().filter(|(_, n)| *n > 0) {
            writeln!(f, "  worker {w}: {n} batches queued")?;
        }
        Ok(())
    }
}
