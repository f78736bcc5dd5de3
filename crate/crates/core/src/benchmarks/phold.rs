//! PHOLD without rollback: logical processes bounce timestamped events and
//! count the ones that arrive in their past.
//!
//! Each worker keeps the pending events of its LPs in one queue and always
//! processes the earliest. An event arriving below its LP's local virtual
//! time (the latest timestamp it processed) is a straggler, which an
//! optimistic engine would have to roll back for.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{RunMetrics, RunSummary};
use crate::runtime::{Activity, Driver, WorkerCtx};
use crate::topology::{Item, Payload, Topology, WorkerRef};

use super::{block_owner, execute, BenchConfig};

pub const ITEM_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PholdSpec {
    pub lps_per_worker: usize,
    pub initial_events_per_lp: usize,
    /// Mean of the exponential timestamp increment.
    pub mean_increment: f64,
    /// Fixed part of every timestamp increment.
    #[serde(default)]
    pub lookahead: u64,
    /// Modelled compute per processed event.
    #[serde(default)]
    pub event_ns: u64,
    /// Events past this timestamp are dropped.
    pub end_time: u64,
    pub seed: u64,
}

/// A successor event: destination LP and timestamp.
pub type Event = (usize, u64);

impl PholdSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lps_per_worker == 0 {
            return Err(Error::InvalidConfig("lps_per_worker must be >= 1".into()));
        }
        if !(self.mean_increment > 0.0 && self.mean_increment.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "mean_increment must be > 0, got {}",
                self.mean_increment
            )));
        }
        Ok(())
    }

    fn event_rng(&self, lp: usize, ts: u64, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((lp as u64) << 32) ^ salt);
        rng.set_word_pos(ts as u128 * 16);
        rng
    }

    fn increment(&self, rng: &mut ChaCha8Rng) -> u64 {
        let exp = Exp::new(1.0 / self.mean_increment).expect("validated rate");
        (self.lookahead + exp.sample(rng).round() as u64).max(1)
    }

    /// Events initially scheduled on `lp`.
    pub fn initial_events(&self, lp: usize) -> Vec<u64> {
        let mut rng = self.event_rng(lp, 0, u32::MAX as u64);
        (0..self.initial_events_per_lp).map(|_| self.increment(&mut rng)).collect()
    }

    /// The event generated by processing `(lp, ts)`, if it falls before the end.
    ///
    /// Depends only on the event itself, so the set of processed events does
    /// not depend on the delivery order.
    pub fn successor(&self, lp: usize, ts: u64, total_lps: usize) -> Option<Event> {
        let mut rng = self.event_rng(lp, ts, 0);
        let dest = rng.random_range(0..total_lps);
        let next = ts + self.increment(&mut rng);
        (next <= self.end_time).then_some((dest, next))
    }
}

struct PholdDriver {
    spec: PholdSpec,
    total_lps: usize,
    workers: usize,
    base: usize,
    pending: BinaryHeap<Reverse<(u64, usize)>>,
    lvt: Vec<u64>,
    processed: u64,
}

impl PholdDriver {
    fn owner(&self, lp: usize) -> WorkerRef {
        WorkerRef(block_owner(lp, self.total_lps, self.workers))
    }
}

impl Driver for PholdDriver {
    fn produce(&mut self, ctx: &mut WorkerCtx<'_>) -> Result<Activity> {
        let Some(Reverse((ts, lp))) = self.pending.pop() else {
            return Ok(Activity::Idle);
        };
        let lvt = &mut self.lvt[lp - self.base];
        *lvt = (*lvt).max(ts);
        self.processed += 1;
        ctx.charge(self.spec.event_ns);
        if let Some((dest, next)) = self.spec.successor(lp, ts, self.total_lps) {
            ctx.send(self.owner(dest), Payload::from_words(&[dest as u64, next]))?;
        }
        Ok(if self.pending.is_empty() {
            Activity::Idle
        } else {
            Activity::Busy
        })
    }

    fn deliver(&mut self, ctx: &mut WorkerCtx<'_>, item: Item) -> Result<()> {
        let lp = item.payload.word(0) as usize;
        let ts = item.payload.word(1);
        let lvt = lp
            .checked_sub(self.base)
            .and_then(|i| self.lvt.get(i))
            .ok_or_else(|| Error::Internal(format!("lp {lp} delivered to the wrong worker")))?;
        if ts < *lvt {
            ctx.count_out_of_order(1);
        }
        self.pending.push(Reverse((ts, lp)));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PholdOutcome {
    pub metrics: RunMetrics,
    pub processed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PholdReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub events_processed: u64,
    pub out_of_order_count: u64,
}

impl PholdOutcome {
    pub fn out_of_order(&self) -> u64 {
        self.metrics.totals.out_of_order_events
    }

    pub fn report(&self) -> Result<PholdReport> {
        Ok(PholdReport {
            summary: self.metrics.summarize()?,
            events_processed: self.processed,
            out_of_order_count: self.out_of_order(),
        })
    }

    /// Compares the processed event count with [`phold_oracle`].
    pub fn verify(&self, spec: &PholdSpec) -> Result<()> {
        let expected = phold_oracle(spec, &self.metrics.topo);
        if expected != self.processed {
            return Err(Error::OracleMismatch(format!(
                "processed {} events, expected {expected}",
                self.processed
            )));
        }
        Ok(())
    }
}

/// Number of events a complete run processes, found by following every
/// chain from its initial event.
pub fn phold_oracle(spec: &PholdSpec, topo: &Topology) -> u64 {
    let total = spec.lps_per_worker * topo.total_workers();
    let mut count = 0;
    for lp in 0..total {
        for ts in spec.initial_events(lp) {
            let mut ev = Some((lp, ts));
            while let Some((l, t)) = ev {
                count += 1;
                ev = spec.successor(l, t, total);
            }
        }
    }
    count
}

pub fn run_phold(spec: &PholdSpec, cfg: &BenchConfig) -> Result<PholdOutcome> {
    spec.validate()?;
    let w = cfg.topo.total_workers();
    let total_lps = spec.lps_per_worker * w;
    let drivers = (0..w)
        .map(|u| {
            let base = u * spec.lps_per_worker;
            let pending = (base..base + spec.lps_per_worker)
                .flat_map(|lp| spec.initial_events(lp).into_iter().map(move |ts| Reverse((ts, lp))))
                .collect();
            PholdDriver {
                spec: *spec,
                total_lps,
                workers: w,
                base,
                pending,
                lvt: vec![0; spec.lps_per_worker],
                processed: 0,
            }
        })
        .collect();
    let done = execute(cfg, ITEM_SIZE, true, drivers)?;
    Ok(PholdOutcome {
        metrics: done.metrics,
        processed: done.drivers.iter().map(|d| d.processed).sum(),
    })
}
