use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Diagnostics, Error, Result};
use crate::metrics::{MetricsShard, RunMetrics};
use crate::schemes::{Aggregator, SourceLane};
use crate::topology::{Clock, ClockMode, ProcessRef, WorkerRef};

use super::net::{Net, Outbound};
use super::{Activity, Driver, Finished, PhaseVote, RunMode, RuntimeConfig, WorkerCtx};

/// Upper bound on consecutive "pending" phase votes without any released work.
const MAX_EMPTY_PHASES: usize = 1 << 20;

struct WorkerState<D> {
    id: WorkerRef,
    driver: D,
    clock: Clock,
    lane: SourceLane,
    shard: MetricsShard,
    next_seq: u64,
    producing: bool,
    wakeups: Vec<(usize, u64)>,
}

impl<D: Driver> WorkerState<D> {
    fn split<'a>(&'a mut self, net: &'a Net) -> (&'a mut D, WorkerCtx<'a>) {
        let WorkerState {
            id,
            driver,
            clock,
            lane,
            shard,
            next_seq,
            wakeups,
            ..
        } = self;
        (
            driver,
            WorkerCtx {
                worker: *id,
                clock,
                lane,
                shard,
                next_seq,
                net,
                wakeups,
            },
        )
    }

    fn ignores_ready_time(net: &Net) -> bool {
        net.cfg.transport.clock == ClockMode::Wall
    }

    /// Handles one ready batch, or else produces once; then applies auto-flush.
    fn step(&mut self, net: &Net) -> Result<()> {
        let wall = Self::ignores_ready_time(net);
        let now = self.clock.now();
        let popped = net.inboxes[self.id.0]
            .lock()
            .expect("inbox poisoned")
            .pop_ready(now, wall);
        if let Some(batch) = popped {
            let clock_mode = net.cfg.transport.clock;
            for item in batch.items {
                self.clock.advance(net.cfg.handle_ns);
                let t = self.clock.now();
                self.shard.record_delivery(&item, t, clock_mode)?;
                let (driver, mut ctx) = self.split(net);
                driver.deliver(&mut ctx, item)?;
            }
            self.producing = true;
        } else if self.producing {
            let (driver, mut ctx) = self.split(net);
            if driver.produce(&mut ctx)? == Activity::Idle {
                self.producing = false;
            }
        }

        let auto = net.agg.auto_flush();
        if auto.timeout_ns.is_some() {
            let now = self.clock.now();
            let mut out = Outbound {
                net,
                shard: &mut self.shard,
                wakeups: &mut self.wakeups,
                now,
            };
            net.agg.flush_expired(&mut self.lane, now, &mut out)?;
        }
        if auto.on_idle && !self.producing && !self.has_ready(net) {
            self.flush(net)?;
        }
        Ok(())
    }

    fn flush(&mut self, net: &Net) -> Result<usize> {
        let (_, mut ctx) = self.split(net);
        ctx.flush()
    }

    fn has_ready(&mut self, net: &Net) -> bool {
        let now = self.clock.now();
        let inbox = net.inboxes[self.id.0].lock().expect("inbox poisoned");
        match inbox.min_ready() {
            Some(t) => Self::ignores_ready_time(net) || t <= now,
            None => false,
        }
    }

    /// Time of this worker's next step, or `None` when it has nothing to do.
    fn next_time(&mut self, net: &Net) -> Option<u64> {
        let now = self.clock.now();
        if self.producing {
            return Some(now);
        }
        let queued = net.inboxes[self.id.0].lock().expect("inbox poisoned").min_ready();
        let deadline = net.agg.next_deadline(&self.lane);
        let next = match (queued, deadline) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }?;
        if Self::ignores_ready_time(net) {
            Some(now)
        } else {
            Some(next.max(now))
        }
    }

    fn run_quantum(&mut self, net: &Net, quantum: usize) -> Result<()> {
        for _ in 0..quantum {
            match self.next_time(net) {
                None => break,
                Some(t) => {
                    self.clock.advance_to(t);
                    self.step(net)?;
                    self.wakeups.clear();
                }
            }
        }
        Ok(())
    }
}

pub(crate) struct Engine<D> {
    net: Net,
    workers: Vec<WorkerState<D>>,
    started: Instant,
}

fn mix(seed: u64, worker: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (worker as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

impl<D: Driver> Engine<D> {
    pub fn new(agg: Aggregator, cfg: RuntimeConfig, drivers: Vec<D>) -> Result<Self> {
        let started = Instant::now();
        let seed = match cfg.mode {
            RunMode::Sequential { seed } => seed,
            RunMode::Threaded => 0,
        };
        let workers = drivers
            .into_iter()
            .enumerate()
            .map(|(u, driver)| {
                Ok(WorkerState {
                    id: WorkerRef(u),
                    driver,
                    clock: Clock::new(cfg.transport.clock, started),
                    lane: agg.lane(WorkerRef(u))?,
                    shard: MetricsShard::new(mix(seed, u), cfg.reservoir_cap, cfg.header_bytes, cfg.trace),
                    next_seq: 0,
                    producing: true,
                    wakeups: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Engine {
            net: Net::new(agg, cfg),
            workers,
            started,
        })
    }

    pub fn run(mut self) -> Result<Finished<D>> {
        match self.net.cfg.mode {
            RunMode::Sequential { seed } => self.run_sequential(seed)?,
            RunMode::Threaded => self.run_threaded()?,
        }
        self.finish()
    }

    fn run_sequential(&mut self, seed: u64) -> Result<()> {
        let w = self.workers.len();
        let mut order: Vec<usize> = (0..w).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rank = vec![0usize; w];
        for (pos, &u) in order.iter().enumerate() {
            rank[u] = pos;
        }
        let mut heap: BinaryHeap<Reverse<(u64, usize, usize)>> = BinaryHeap::new();
        let mut scheduled: Vec<Option<u64>> = vec![None; w];
        let schedule = |heap: &mut BinaryHeap<_>, scheduled: &mut Vec<Option<u64>>, u: usize, t: u64| {
            scheduled[u] = Some(t);
            heap.push(Reverse((t, rank[u], u)));
        };

        for u in 0..w {
            schedule(&mut heap, &mut scheduled, u, 0);
        }
        let mut steps = 0u64;
        loop {
            while let Some(Reverse((t, _, u))) = heap.pop() {
                if scheduled[u] != Some(t) {
                    continue;
                }
                scheduled[u] = None;
                self.workers[u].clock.advance_to(t);
                loop {
                    self.workers[u].step(&self.net)?;
                    steps += 1;
                    if steps.is_multiple_of(4096) {
                        self.check_timeout()?;
                    }
                    let mut wakeups = std::mem::take(&mut self.workers[u].wakeups);
                    for (v, ready) in wakeups.drain(..) {
                        if v == u {
                            continue;
                        }
                        let at = ready.max(self.workers[v].clock.now());
                        if scheduled[v].is_none_or(|s| at < s) {
                            schedule(&mut heap, &mut scheduled, v, at);
                        }
                    }
                    self.workers[u].wakeups = wakeups;
                    match self.workers[u].next_time(&self.net) {
                        None => break,
                        Some(next) => {
                            let runs_first = heap
                                .peek()
                                .is_none_or(|Reverse((pt, pr, _))| (next, rank[u]) <= (*pt, *pr));
                            if runs_first {
                                self.workers[u].clock.advance_to(next);
                            } else {
                                schedule(&mut heap, &mut scheduled, u, next);
                                break;
                            }
                        }
                    }
                }
            }
            if !self.settle()? {
                return Ok(());
            }
            for u in 0..w {
                self.workers[u].wakeups.clear();
                if let Some(t) = self.workers[u].next_time(&self.net) {
                    schedule(&mut heap, &mut scheduled, u, t);
                }
            }
        }
    }

    fn run_threaded(&mut self) -> Result<()> {
        let quantum = self.net.cfg.quantum;
        loop {
            let net = &self.net;
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                self.workers
                    .par_iter_mut()
                    .try_for_each(|w| w.run_quantum(net, quantum))?;
            }
            #[cfg(not(feature = "parallel"))]
            {
                self.workers.iter_mut().try_for_each(|w| w.run_quantum(net, quantum))?;
            }
            self.check_timeout()?;
            let net = &self.net;
            if self.workers.iter_mut().any(|w| w.next_time(net).is_some()) {
                continue;
            }
            if !self.settle()? {
                return Ok(());
            }
        }
    }

    /// Called when no worker has anything to do. Runs a final flush round and
    /// the drivers' quiescence hooks. Returns whether new work appeared.
    fn settle(&mut self) -> Result<bool> {
        let global = self.workers.iter_mut().map(|w| w.clock.now()).max().unwrap_or(0);
        let mut emitted = 0;
        for w in self.workers.iter_mut() {
            w.clock.advance_to(global);
            emitted += w.flush(&self.net)?;
        }
        if emitted > 0 {
            return Ok(true);
        }
        for _ in 0..MAX_EMPTY_PHASES {
            let mut vote = PhaseVote::Done;
            for w in self.workers.iter_mut() {
                let (driver, mut ctx) = w.split(&self.net);
                vote = vote.max(driver.on_quiescence(&mut ctx)?);
            }
            match vote {
                PhaseVote::Done => return Ok(false),
                PhaseVote::Pending => continue,
                PhaseVote::Released => {
                    for w in self.workers.iter_mut() {
                        w.producing = true;
                    }
                    return Ok(true);
                }
            }
        }
        Err(Error::Internal("drivers kept deferring work without releasing any".into()))
    }

    fn diagnostics(&self) -> Diagnostics {
        let topo = self.net.agg.topology();
        Diagnostics {
            produced: self.workers.iter().map(|w| w.shard.produced).sum(),
            delivered: self.workers.iter().map(|w| w.shard.delivered).sum(),
            lane_fills: self.workers.iter().map(|w| (w.id.0, w.lane.pending())).collect(),
            shared_fills: (0..topo.total_processes())
                .map(|p| (p, self.net.agg.shared_fill(ProcessRef(p))))
                .collect(),
            queue_depths: self
                .net
                .inboxes
                .iter()
                .enumerate()
                .map(|(u, q)| (u, q.lock().expect("inbox poisoned").len()))
                .collect(),
        }
    }

    fn check_timeout(&self) -> Result<()> {
        let limit = self.net.cfg.timeout;
        if self.started.elapsed() > limit {
            return Err(Error::Timeout {
                limit_ms: limit.as_millis() as u64,
                diagnostics: self.diagnostics(),
            });
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Finished<D>> {
        let diag = self.diagnostics();
        let buffered: usize = diag.lane_fills.iter().chain(&diag.shared_fills).map(|(_, n)| n).sum();
        let queued: usize = diag.queue_depths.iter().map(|(_, n)| n).sum();
        if diag.produced != diag.delivered || buffered != 0 || queued != 0 {
            return Err(Error::Internal(format!("run stopped before quiescence\n{diag}")));
        }
        let runtime_ns = match self.net.cfg.transport.clock {
            ClockMode::Virtual => self.workers.iter_mut().map(|w| w.clock.now()).max().unwrap_or(0),
            ClockMode::Wall => self.started.elapsed().as_nanos() as u64,
        };
        let egress = self
            .net
            .comm
            .iter()
            .map(|c| c.lock().expect("comm context poisoned").egress.clone())
            .collect();
        let agg = &self.net.agg;
        let (drivers, shards): (Vec<D>, Vec<MetricsShard>) = self.workers.into_iter().map(|w| (w.driver, w.shard)).unzip();
        let mut metrics = RunMetrics::merge(
            agg.kind(),
            *agg.topology(),
            agg.capacity(),
            agg.item_size(),
            self.net.cfg.mode,
            self.net.cfg.transport.clock,
            shards,
            egress,
        );
        metrics.runtime_ns = runtime_ns;
        metrics.quiesced = true;
        Ok(Finished { metrics, drivers })
    }
}
