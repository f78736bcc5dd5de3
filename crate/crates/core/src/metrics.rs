//! Overhead and latency accounting.
//!
//! Every worker context owns a [`MetricsShard`]; shards are merged into
//! [`RunMetrics`] once the run has quiesced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::RunMode;
use crate::schemes::{Cause, CoalescedMessage, SchemeKind, Scope};
use crate::topology::{ClockMode, Item, Topology};

pub const DEFAULT_RESERVOIR: usize = 1_000_000;

/// Uniform reservoir of latency samples with exact count, sum and max.
#[derive(Debug, Clone)]
pub struct LatencyReservoir {
    cap: usize,
    seen: u64,
    sum: u128,
    max: u64,
    samples: Vec<u64>,
    rng: ChaCha8Rng,
}

impl LatencyReservoir {
    pub fn new(cap: usize, seed: u64) -> Self {
        LatencyReservoir {
            cap: cap.max(1),
            seen: 0,
            sum: 0,
            max: 0,
            samples: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, ns: u64) {
        self.seen += 1;
        self.sum += ns as u128;
        self.max = self.max.max(ns);
        if self.samples.len() < self.cap {
            self.samples.push(ns);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.samples[j as usize] = ns;
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.seen
    }

    pub fn samples(&self) -> &[u64] {
        &self.samples
    }

    pub fn mean(&self) -> Option<f64> {
        (self.seen > 0).then(|| self.sum as f64 / self.seen as f64)
    }

    pub fn max(&self) -> Option<u64> {
        (self.seen > 0).then_some(self.max)
    }

    /// Nearest-rank percentile over the retained samples.
    pub fn percentile(&self, p: f64) -> Option<u64> {
        let mut sorted = self.samples.clone();
        sorted.sort_unstable();
        nearest_rank(&sorted, p)
    }

    /// Folds `other` in, keeping at most `cap` samples drawn in proportion to
    /// how many values each side has seen.
    pub fn merge(&mut self, other: &LatencyReservoir) {
        let total_seen = self.seen + other.seen;
        if self.samples.len() + other.samples.len() <= self.cap {
            self.samples.extend_from_slice(&other.samples);
        } else if total_seen > 0 {
            let keep_self = ((self.cap as u128 * self.seen as u128) / total_seen as u128) as usize;
            let keep_self = keep_self.min(self.samples.len());
            let keep_other = (self.cap - keep_self).min(other.samples.len());
            let mut mine = std::mem::take(&mut self.samples);
            partial_shuffle(&mut mine, keep_self, &mut self.rng);
            mine.truncate(keep_self);
            let mut theirs = other.samples.clone();
            partial_shuffle(&mut theirs, keep_other, &mut self.rng);
            theirs.truncate(keep_other);
            mine.extend(theirs);
            self.samples = mine;
        }
        self.seen = total_seen;
        self.sum += other.sum;
        self.max = self.max.max(other.max);
    }
}

fn partial_shuffle(v: &mut [u64], k: usize, rng: &mut ChaCha8Rng) {
    for i in 0..k.min(v.len()) {
        let j = rng.random_range(i..v.len());
        v.swap(i, j);
    }
}

/// Nearest-rank percentile of an ascending slice: element at `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// One line of the optional message trace.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TraceRecord {
    pub origin: usize,
    pub dest_scope: Scope,
    pub k: usize,
    pub cause: Cause,
    pub grouped: bool,
    pub sent_at: u64,
}

/// Per-context counters.
#[derive(Debug, Clone)]
pub struct MetricsShard {
    pub messages_sent: u64,
    pub full_messages: u64,
    pub flush_messages: u64,
    pub bytes_sent: u64,
    /// Sum of `alpha + beta * bytes` over emitted messages.
    pub transport_cost_ns: f64,
    pub produced: u64,
    pub delivered: u64,
    pub self_sends: u64,
    /// Items that went into an aggregation buffer (remote destinations).
    pub buffered_items: u64,
    pub wasted_updates: u64,
    pub out_of_order_events: u64,
    pub grouping_ops: u64,
    /// Largest `sent_at - created_at` over items leaving in a message.
    pub max_buffer_delay_ns: u64,
    pub latency: LatencyReservoir,
    pub trace: Option<Vec<TraceRecord>>,
    header_bytes: u64,
}

impl MetricsShard {
    pub fn new(seed: u64, reservoir_cap: usize, header_bytes: u64, trace: bool) -> Self {
        MetricsShard {
            messages_sent: 0,
            full_messages: 0,
            flush_messages: 0,
            bytes_sent: 0,
            transport_cost_ns: 0.0,
            produced: 0,
            delivered: 0,
            self_sends: 0,
            buffered_items: 0,
            wasted_updates: 0,
            out_of_order_events: 0,
            grouping_ops: 0,
            max_buffer_delay_ns: 0,
            latency: LatencyReservoir::new(reservoir_cap, seed),
            trace: trace.then(Vec::new),
            header_bytes,
        }
    }

    /// Counts one emitted message of items of `item_size` bytes.
    pub fn record_message(&mut self, msg: &CoalescedMessage, item_size: usize) {
        self.messages_sent += 1;
        match msg.cause {
            Cause::Full => self.full_messages += 1,
            Cause::Flush => self.flush_messages += 1,
        }
        self.bytes_sent += (msg.len() * item_size) as u64 + self.header_bytes;
        for item in &msg.items {
            self.max_buffer_delay_ns = self
                .max_buffer_delay_ns
                .max(msg.sent_at.saturating_sub(item.created_at));
        }
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                origin: msg.origin.0,
                dest_scope: msg.dest_scope,
                k: msg.len(),
                cause: msg.cause,
                grouped: msg.grouped,
                sent_at: msg.sent_at,
            });
        }
    }

    /// Counts one item handed to its destination handler.
    pub fn record_delivery(&mut self, item: &Item, delivered_at: u64, clock: ClockMode) -> Result<()> {
        let latency = match delivered_at.checked_sub(item.created_at) {
            Some(l) => l,
            None if clock == ClockMode::Virtual => {
                return Err(Error::Internal(format!(
                    "item {}:{} delivered at {delivered_at} before creation at {}",
                    item.src, item.seq, item.created_at
                )))
            }
            None => 0,
        };
        self.latency.push(latency);
        self.delivered += 1;
        Ok(())
    }
}

/// Egress counters of one process's communication context.
#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct EgressStats {
    pub messages: u64,
    pub first_departure_ns: Option<u64>,
    pub last_departure_ns: Option<u64>,
    /// Serial time the context spent on messages.
    pub busy_ns: u64,
}

impl EgressStats {
    /// Messages per ns between the first and last departure.
    pub fn rate(&self) -> Option<f64> {
        match (self.first_departure_ns, self.last_departure_ns) {
            (Some(a), Some(b)) if b > a && self.messages > 1 => Some((self.messages - 1) as f64 / (b - a) as f64),
            _ => None,
        }
    }
}

/// Per-source-worker counters kept after merging.
#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq, Eq)]
pub struct SourceCounters {
    pub messages: u64,
    pub buffered_items: u64,
}

/// Merged measurements of one run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub scheme: SchemeKind,
    pub topo: Topology,
    pub g: usize,
    pub item_size: usize,
    pub mode: RunMode,
    pub clock: ClockMode,
    pub totals: MetricsShard,
    pub per_worker: Vec<SourceCounters>,
    pub egress: Vec<EgressStats>,
    pub runtime_ns: u64,
    pub quiesced: bool,
}

impl RunMetrics {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn merge(
        scheme: SchemeKind,
        topo: Topology,
        g: usize,
        item_size: usize,
        mode: RunMode,
        clock: ClockMode,
        shards: Vec<MetricsShard>,
        egress: Vec<EgressStats>,
    ) -> Self {
        let per_worker = shards
            .iter()
            .map(|s| SourceCounters {
                messages: s.messages_sent,
                buffered_items: s.buffered_items,
            })
            .collect();
        let mut it = shards.into_iter();
        let mut totals = it.next().expect("at least one worker");
        for s in it {
            totals.messages_sent += s.messages_sent;
            totals.full_messages += s.full_messages;
            totals.flush_messages += s.flush_messages;
            totals.bytes_sent += s.bytes_sent;
            totals.transport_cost_ns += s.transport_cost_ns;
            totals.produced += s.produced;
            totals.delivered += s.delivered;
            totals.self_sends += s.self_sends;
            totals.buffered_items += s.buffered_items;
            totals.wasted_updates += s.wasted_updates;
            totals.out_of_order_events += s.out_of_order_events;
            totals.grouping_ops += s.grouping_ops;
            totals.max_buffer_delay_ns = totals.max_buffer_delay_ns.max(s.max_buffer_delay_ns);
            totals.latency.merge(&s.latency);
            if let (Some(t), Some(o)) = (&mut totals.trace, s.trace) {
                t.extend(o);
            }
        }
        if let Some(t) = &mut totals.trace {
            t.sort_by_key(|r| (r.sent_at, r.origin));
        }
        RunMetrics {
            scheme,
            topo,
            g,
            item_size,
            mode,
            clock,
            totals,
            per_worker,
            egress,
            runtime_ns: 0,
            quiesced: false,
        }
    }

    /// Message and buffered-item counts per source scope: per worker for
    /// worker-owned schemes, per process for PP.
    pub fn per_source_scope(&self) -> Vec<SourceCounters> {
        if self.scheme != SchemeKind::PP {
            return self.per_worker.clone();
        }
        self.per_worker
            .chunks(self.topo.workers_per_proc())
            .map(|c| {
                c.iter().fold(SourceCounters::default(), |acc, s| SourceCounters {
                    messages: acc.messages + s.messages,
                    buffered_items: acc.buffered_items + s.buffered_items,
                })
            })
            .collect()
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.totals.trace.as_deref()
    }

    /// Writes the trace as JSON lines.
    pub fn write_trace(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        for rec in self.trace().unwrap_or_default() {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn summarize(&self) -> Result<RunSummary> {
        if !self.quiesced {
            return Err(Error::NotQuiesced);
        }
        let t = &self.totals;
        Ok(RunSummary {
            schema: 1,
            scheme: self.scheme,
            topo: self.topo,
            g: self.g,
            mode: self.mode,
            clock: self.clock,
            messages_sent: t.messages_sent,
            full_messages: t.full_messages,
            flush_messages: t.flush_messages,
            bytes_sent: t.bytes_sent,
            produced: t.produced,
            delivered: t.delivered,
            self_sends: t.self_sends,
            item_latency: LatencySummary {
                mean_ns: t.latency.mean(),
                p50: t.latency.percentile(50.0),
                p99: t.latency.percentile(99.0),
                max: t.latency.max(),
            },
            wasted_updates: t.wasted_updates,
            out_of_order_events: t.out_of_order_events,
            runtime_ns: self.runtime_ns,
        })
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LatencySummary {
    pub mean_ns: Option<f64>,
    pub p50: Option<u64>,
    pub p99: Option<u64>,
    pub max: Option<u64>,
}

/// Serializable summary of a quiesced run.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunSummary {
    pub schema: u32,
    pub scheme: SchemeKind,
    pub topo: Topology,
    pub g: usize,
    pub mode: RunMode,
    pub clock: ClockMode,
    pub messages_sent: u64,
    pub full_messages: u64,
    pub flush_messages: u64,
    pub bytes_sent: u64,
    pub produced: u64,
    pub delivered: u64,
    pub self_sends: u64,
    pub item_latency: LatencySummary,
    pub wasted_updates: u64,
    pub out_of_order_events: u64,
    pub runtime_ns: u64,
}

/// Flat CSV form of a [`RunSummary`], one row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub benchmark: String,
    pub scheme: String,
    pub nodes: usize,
    pub ppn: usize,
    pub wpp: usize,
    pub g: usize,
    pub messages_sent: u64,
    pub full_messages: u64,
    pub flush_messages: u64,
    pub bytes_sent: u64,
    pub produced: u64,
    pub delivered: u64,
    pub latency_mean_ns: Option<f64>,
    pub latency_p50_ns: Option<u64>,
    pub latency_p99_ns: Option<u64>,
    pub latency_max_ns: Option<u64>,
    pub wasted_updates: u64,
    pub out_of_order_events: u64,
    pub runtime_ns: u64,
}

impl CsvRow {
    pub fn new(benchmark: &str, s: &RunSummary) -> Self {
        CsvRow {
            benchmark: benchmark.to_string(),
            scheme: s.scheme.to_string(),
            nodes: s.topo.num_nodes(),
            ppn: s.topo.procs_per_node(),
            wpp: s.topo.workers_per_proc(),
            g: s.g,
            messages_sent: s.messages_sent,
            full_messages: s.full_messages,
            flush_messages: s.flush_messages,
            bytes_sent: s.bytes_sent,
            produced: s.produced,
            delivered: s.delivered,
            latency_mean_ns: s.item_latency.mean_ns,
            latency_p50_ns: s.item_latency.p50,
            latency_p99_ns: s.item_latency.p99,
            latency_max_ns: s.item_latency.max,
            wasted_updates: s.wasted_updates,
            out_of_order_events: s.out_of_order_events,
            runtime_ns: s.runtime_ns,
        }
    }

    pub const HEADER: [&'static str; 19] = [
        "benchmark",
        "scheme",
        "nodes",
        "ppn",
        "wpp",
        "g",
        "messages_sent",
        "full_messages",
        "flush_messages",
        "bytes_sent",
        "produced",
        "delivered",
        "latency_mean_ns",
        "latency_p50_ns",
        "latency_p99_ns",
        "latency_max_ns",
        "wasted_updates",
        "out_of_order_events",
        "runtime_ns",
    ];
}
