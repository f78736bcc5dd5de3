//! Delivery queues, communication contexts and the transport seen by aggregators.

use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::Result;
use crate::metrics::{EgressStats, MetricsShard};
use crate::schemes::{Aggregator, CoalescedMessage, Transport};
use crate::topology::{ClockMode, Item, WorkerRef};

use super::RuntimeConfig;

#[derive(Debug)]
pub(crate) struct Pending {
    pub ready_at: u64,
    pub seq: u64,
    pub items: Vec<Item>,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.ready_at, self.seq) == (other.ready_at, other.seq)
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (self.ready_at, self.seq).cmp(&(other.ready_at, other.seq))
    }
}

/// Delivery queue of one worker. Priority batches that are ready go first.
#[derive(Debug, Default)]
pub(crate) struct Inbox {
    expedited: BinaryHeap<Reverse<Pending>>,
    ordinary: BinaryHeap<Reverse<Pending>>,
}

impl Inbox {
    pub fn push(&mut self, p: Pending, priority: bool) {
        if priority {
            self.expedited.push(Reverse(p));
        } else {
            self.ordinary.push(Reverse(p));
        }
    }

    /// Earliest ready time of any queued batch.
    pub fn min_ready(&self) -> Option<u64> {
        let a = self.expedited.peek().map(|r| r.0.ready_at);
        let b = self.ordinary.peek().map(|r| r.0.ready_at);
        match (a, b) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Pops a batch that is ready at `now`; with `ignore_time` any batch is ready.
    pub fn pop_ready(&mut self, now: u64, ignore_time: bool) -> Option<Pending> {
        let ready = |h: &BinaryHeap<Reverse<Pending>>| h.peek().is_some_and(|r| ignore_time || r.0.ready_at <= now);
        if ready(&self.expedited) {
            return self.expedited.pop().map(|r| r.0);
        }
        if ready(&self.ordinary) {
            return self.ordinary.pop().map(|r| r.0);
        }
        None
    }

    pub fn len(&self) -> usize {
        self.expedited.len() + self.ordinary.len()
    }

    #[cfg(test)]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serial resource modelling one process's communication context, plus
/// FIFO bookkeeping of its outgoing channels.
#[derive(Debug)]
pub(crate) struct CommState {
    free_at: u64,
    last_arrival: Vec<u64>,
    pub egress: EgressStats,
}

impl CommState {
    pub fn new(processes: usize) -> Self {
        CommState {
            free_at: 0,
            last_arrival: vec![0; processes],
            egress: EgressStats::default(),
        }
    }
}

/// Shared state of a run.
pub(crate) struct Net {
    pub agg: Aggregator,
    pub cfg: RuntimeConfig,
    pub inboxes: Vec<Mutex<Inbox>>,
    pub comm: Vec<Mutex<CommState>>,
    arrival_seq: AtomicU64,
}

impl Net {
    pub fn new(agg: Aggregator, cfg: RuntimeConfig) -> Self {
        let topo = *agg.topology();
        Net {
            inboxes: (0..topo.total_workers()).map(|_| Mutex::new(Inbox::default())).collect(),
            comm: (0..topo.total_processes())
                .map(|_| Mutex::new(CommState::new(topo.total_processes())))
                .collect(),
            agg,
            cfg,
            arrival_seq: AtomicU64::new(0),
        }
    }

    pub fn enqueue(&self, dest: WorkerRef, ready_at: u64, items: Vec<Item>, priority: bool, wakeups: &mut Vec<(usize, u64)>) {
        let seq = self.arrival_seq.fetch_add(1, Ordering::Relaxed);
        self.inboxes[dest.0]
            .lock()
            .expect("inbox poisoned")
            .push(Pending { ready_at, seq, items }, priority);
        wakeups.push((dest.0, ready_at));
    }

    /// Departure and arrival time of a `bytes`-byte message leaving at `sent_at`.
    ///
    /// Also returns the modelled `alpha + beta * bytes` cost.
    pub fn transmit(&self, msg: &CoalescedMessage, bytes: u64) -> (u64, u64, f64) {
        let t = &self.cfg.transport;
        let cost = t.alpha_ns + t.beta_ns_per_byte * bytes as f64;
        let dest = msg.dest_process(self.agg.topology()).0;
        let mut comm = self.comm[msg.origin.0].lock().expect("comm context poisoned");
        let departure = if t.comm_enabled {
            let start = msg.sent_at.max(comm.free_at);
            comm.free_at = start + t.comm_cost_ns;
            comm.egress.busy_ns += t.comm_cost_ns;
            start + t.comm_cost_ns
        } else {
            msg.sent_at
        };
        comm.egress.messages += 1;
        comm.egress.first_departure_ns.get_or_insert(departure);
        comm.egress.last_departure_ns = Some(departure);
        let arrival = match t.clock {
            ClockMode::Virtual => {
                let a = (departure + cost.round() as u64).max(comm.last_arrival[dest]);
                comm.last_arrival[dest] = a;
                a
            }
            // recorded but not slept
            ClockMode::Wall => msg.sent_at,
        };
        (departure, arrival, cost)
    }
}

/// Transport handed to the aggregator on behalf of one worker.
pub(crate) struct Outbound<'a> {
    pub net: &'a Net,
    pub shard: &'a mut MetricsShard,
    pub wakeups: &'a mut Vec<(usize, u64)>,
    pub now: u64,
}

impl Transport for Outbound<'_> {
    fn send_remote(&mut self, msg: CoalescedMessage) -> Result<()> {
        let item_size = self.net.agg.item_size();
        self.shard.record_message(&msg, item_size);
        let bytes = (msg.len() * item_size) as u64 + self.net.cfg.header_bytes;
        let (_, arrival, cost) = self.net.transmit(&msg, bytes);
        self.shard.transport_cost_ns += cost;
        let priority = msg.priority;
        let (batches, stats) = self.net.agg.on_receive(msg)?;
        self.shard.grouping_ops += stats.total();
        for (dest, items) in batches {
            self.net.enqueue(dest, arrival, items, priority, self.wakeups);
        }
        Ok(())
    }

    fn deliver_local(&mut self, dest: WorkerRef, items: Vec<Item>) -> Result<()> {
        self.shard.self_sends += items.len() as u64;
        self.net.enqueue(dest, self.now, items, true, self.wakeups);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pending(ready_at: u64, seq: u64) -> Pending {
        Pending {
            ready_at,
            seq,
            items: Vec::new(),
        }
    }

    #[test]
    fn inbox_orders_by_time_then_priority() {
        let mut inbox = Inbox::default();
        inbox.push(pending(5, 0), false);
        inbox.push(pending(7, 1), true);
        inbox.push(pending(3, 2), true);
        assert_eq!(inbox.min_ready(), Some(3));
        assert!(inbox.pop_ready(2, false).is_none());
        assert_eq!(inbox.pop_ready(10, false).unwrap().seq, 2);
        // both ready: the expedited one wins even though it is later
        assert_eq!(inbox.pop_ready(10, false).unwrap().seq, 1);
        assert_eq!(inbox.pop_ready(10, false).unwrap().seq, 0);
        assert!(inbox.is_empty());
    }

    #[test]
    fn ignore_time_pops_future_batches() {
        let mut inbox = Inbox::default();
        inbox.push(pending(1_000, 0), true);
        assert!(inbox.pop_ready(0, false).is_none());
        assert!(inbox.pop_ready(0, true).is_some());
    }
}
