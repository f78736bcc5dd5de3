//! Index-gather: workers request random table entries and wait for the values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{nearest_rank, RunMetrics, RunSummary};
use crate::runtime::{Activity, Driver, WorkerCtx};
use crate::topology::{Item, Payload, Topology, WorkerRef};

use super::{block_owner, block_range, execute, worker_rng, BenchConfig};

pub const ITEM_SIZE: usize = 16;

const RESPONSE: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgSpec {
    pub requests_per_worker: u64,
    pub table_size: usize,
    pub seed: u64,
}

impl IgSpec {
    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if self.table_size < topo.total_workers() {
            return Err(Error::InvalidConfig(format!(
                "table_size {} is smaller than the worker count {}",
                self.table_size,
                topo.total_workers()
            )));
        }
        if self.requests_per_worker >= RESPONSE {
            return Err(Error::InvalidConfig("too many requests per worker".into()));
        }
        Ok(())
    }

    /// Content of table entry `index`.
    pub fn value_of(&self, index: usize) -> u64 {
        let mut z = (index as u64) ^ self.seed.rotate_left(32);
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

struct Request {
    index: usize,
    created_at: u64,
    value: Option<u64>,
}

struct IgDriver {
    spec: IgSpec,
    workers: usize,
    rng: ChaCha8Rng,
    base: usize,
    table: Vec<u64>,
    requests: Vec<Request>,
    round_trips: Vec<u64>,
}

impl Driver for IgDriver {
    fn produce(&mut self, ctx: &mut WorkerCtx<'_>) -> Result<Activity> {
        if self.requests.len() as u64 >= self.spec.requests_per_worker {
            return Ok(Activity::Idle);
        }
        let index = self.rng.random_range(0..self.spec.table_size);
        let id = self.requests.len() as u64;
        let dest = WorkerRef(block_owner(index, self.spec.table_size, self.workers));
        ctx.send(dest, Payload::from_words(&[index as u64, id]))?;
        let created_at = ctx.now();
        self.requests.push(Request {
            index,
            created_at,
            value: None,
        });
        Ok(Activity::Busy)
    }

    fn deliver(&mut self, ctx: &mut WorkerCtx<'_>, item: Item) -> Result<()> {
        let tag = item.payload.word(0);
        if tag & RESPONSE == 0 {
            let index = tag as usize;
            let value = index
                .checked_sub(self.base)
                .and_then(|i| self.table.get(i))
                .copied()
                .ok_or_else(|| Error::Internal(format!("index {index} requested from the wrong worker")))?;
            ctx.send(item.src, Payload::from_words(&[RESPONSE | item.payload.word(1), value]))?;
            return Ok(());
        }
        let id = (tag & !RESPONSE) as usize;
        let now = ctx.now();
        let req = self
            .requests
            .get_mut(id)
            .ok_or_else(|| Error::OracleMismatch(format!("response to unknown request {id}")))?;
        if req.value.is_some() {
            return Err(Error::OracleMismatch(format!("request {id} answered twice")));
        }
        req.value = Some(item.payload.word(1));
        self.round_trips.push(now - req.created_at);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundTrip {
    pub count: u64,
    pub mean_ns: Option<f64>,
    pub p50: Option<u64>,
    pub p99: Option<u64>,
    pub max: Option<u64>,
}

impl RoundTrip {
    fn from_samples(mut samples: Vec<u64>) -> Self {
        samples.sort_unstable();
        let n = samples.len();
        RoundTrip {
            count: n as u64,
            mean_ns: (n > 0).then(|| samples.iter().map(|&s| s as f64).sum::<f64>() / n as f64),
            p50: nearest_rank(&samples, 50.0),
            p99: nearest_rank(&samples, 99.0),
            max: samples.last().copied(),
        }
    }
}

/// One worker's requests: (table index, value received).
pub type Answers = Vec<(usize, Option<u64>)>;

#[derive(Debug, Clone)]
pub struct IgOutcome {
    pub metrics: RunMetrics,
    pub answers: Vec<Answers>,
    pub round_trip: RoundTrip,
}

#[derive(Debug, Clone, Serialize)]
pub struct IgReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub round_trip: RoundTrip,
}

impl IgOutcome {
    pub fn report(&self) -> Result<IgReport> {
        Ok(IgReport {
            summary: self.metrics.summarize()?,
            round_trip: self.round_trip.clone(),
        })
    }

    /// Every request answered exactly once with the right table entry.
    pub fn verify(&self, spec: &IgSpec) -> Result<()> {
        for (u, answers) in self.answers.iter().enumerate() {
            if answers.len() as u64 != spec.requests_per_worker {
                return Err(Error::OracleMismatch(format!(
                    "worker {u} issued {} requests, expected {}",
                    answers.len(),
                    spec.requests_per_worker
                )));
            }
            for (id, &(index, value)) in answers.iter().enumerate() {
                match value {
                    None => return Err(Error::OracleMismatch(format!("worker {u} request {id} unanswered"))),
                    Some(v) if v != spec.value_of(index) => {
                        return Err(Error::OracleMismatch(format!(
                            "worker {u} request {id} for index {index} got {v:#x}"
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

pub fn run_ig(spec: &IgSpec, cfg: &BenchConfig) -> Result<IgOutcome> {
    spec.validate(&cfg.topo)?;
    let w = cfg.topo.total_workers();
    let drivers = (0..w)
        .map(|u| {
            let block = block_range(u, spec.table_size, w);
            IgDriver {
                spec: *spec,
                workers: w,
                rng: worker_rng(spec.seed, u),
                base: block.start,
                table: block.map(|i| spec.value_of(i)).collect(),
                requests: Vec::with_capacity(spec.requests_per_worker as usize),
                round_trips: Vec::new(),
            }
        })
        .collect();
    let done = execute(cfg, ITEM_SIZE, true, drivers)?;
    let mut samples = Vec::new();
    let mut answers = Vec::with_capacity(w);
    for d in done.drivers {
        samples.extend(d.round_trips);
        answers.push(d.requests.into_iter().map(|r| (r.index, r.value)).collect());
    }
    Ok(IgOutcome {
        metrics: done.metrics,
        answers,
        round_trip: RoundTrip::from_samples(samples),
    })
}
