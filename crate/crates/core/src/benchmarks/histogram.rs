//! Distributed histogram: every worker sends increments to random bins.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{RunMetrics, RunSummary};
use crate::runtime::{Activity, Driver, WorkerCtx};
use crate::topology::{Item, Payload, Topology, WorkerRef};

use super::{block_owner, block_range, digest, execute, worker_rng, BenchConfig};

pub const ITEM_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub updates_per_worker: u64,
    /// Bins, spread evenly over the workers.
    pub table_size: usize,
    pub seed: u64,
}

impl HistogramSpec {
    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if self.table_size < topo.total_workers() {
            return Err(Error::InvalidConfig(format!(
                "table_size {} is smaller than the worker count {}",
                self.table_size,
                topo.total_workers()
            )));
        }
        Ok(())
    }

    /// Bin of the next update drawn from `rng`.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(0..self.table_size)
    }
}

struct HistogramDriver {
    spec: HistogramSpec,
    workers: usize,
    rng: ChaCha8Rng,
    remaining: u64,
    base: usize,
    bins: Vec<u64>,
    ended: bool,
}

impl Driver for HistogramDriver {
    fn produce(&mut self, ctx: &mut WorkerCtx<'_>) -> Result<Activity> {
        if self.remaining > 0 {
            self.remaining -= 1;
            let bin = self.spec.draw(&mut self.rng);
            let dest = WorkerRef(block_owner(bin, self.spec.table_size, self.workers));
            ctx.send(dest, Payload::from_words(&[bin as u64]))?;
            return Ok(Activity::Busy);
        }
        if !self.ended {
            self.ended = true;
            ctx.flush_at_end()?;
        }
        Ok(Activity::Idle)
    }

    fn deliver(&mut self, _ctx: &mut WorkerCtx<'_>, item: Item) -> Result<()> {
        let bin = item.payload.word(0) as usize;
        let slot = bin
            .checked_sub(self.base)
            .and_then(|i| self.bins.get_mut(i))
            .ok_or_else(|| Error::Internal(format!("bin {bin} delivered to the wrong worker {}", item.dest)))?;
        *slot += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HistogramOutcome {
    pub metrics: RunMetrics,
    pub table: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub table_total: u64,
    pub table_digest: String,
}

impl HistogramOutcome {
    pub fn report(&self) -> Result<HistogramReport> {
        Ok(HistogramReport {
            summary: self.metrics.summarize()?,
            table_total: self.table.iter().sum(),
            table_digest: format!("{:016x}", digest(self.table.iter().copied())),
        })
    }

    /// Compares the table with [`histogram_oracle`].
    pub fn verify(&self, spec: &HistogramSpec) -> Result<()> {
        let expected = histogram_oracle(spec, &self.metrics.topo);
        match expected.iter().zip(&self.table).position(|(a, b)| a != b) {
            None if expected.len() == self.table.len() => Ok(()),
            None => Err(Error::OracleMismatch(format!(
                "table has {} bins, expected {}",
                self.table.len(),
                expected.len()
            ))),
            Some(bin) => Err(Error::OracleMismatch(format!(
                "bin {bin} holds {}, expected {}",
                self.table[bin], expected[bin]
            ))),
        }
    }
}

/// Table the run must produce: the same per-worker streams counted in one place.
pub fn histogram_oracle(spec: &HistogramSpec, topo: &Topology) -> Vec<u64> {
    let mut table = vec![0u64; spec.table_size];
    for u in 0..topo.total_workers() {
        let mut rng = worker_rng(spec.seed, u);
        for _ in 0..spec.updates_per_worker {
            table[spec.draw(&mut rng)] += 1;
        }
    }
    table
}

pub fn run_histogram(spec: &HistogramSpec, cfg: &BenchConfig) -> Result<HistogramOutcome> {
    spec.validate(&cfg.topo)?;
    let w = cfg.topo.total_workers();
    let drivers = (0..w)
        .map(|u| {
            let block = block_range(u, spec.table_size, w);
            HistogramDriver {
                spec: *spec,
                workers: w,
                rng: worker_rng(spec.seed, u),
                remaining: spec.updates_per_worker,
                base: block.start,
                bins: vec![0; block.len()],
                ended: false,
            }
        })
        .collect();
    let done = execute(cfg, ITEM_SIZE, false, drivers)?;
    let table = done.drivers.into_iter().flat_map(|d| d.bins).collect();
    Ok(HistogramOutcome {
        metrics: done.metrics,
        table,
    })
}
