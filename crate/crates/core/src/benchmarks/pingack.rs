//! Node-to-node message rate: node 0 streams to node 1, node 1 acks to worker 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EgressStats, RunMetrics, RunSummary};
use crate::runtime::{Activity, Driver, WorkerCtx};
use crate::topology::{Item, Payload, Topology, WorkerRef};

use super::{execute, BenchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingAckSpec {
    pub messages_per_worker: u64,
    /// Item size in bytes, at least 8.
    pub message_size: usize,
}

impl PingAckSpec {
    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if topo.num_nodes() < 2 {
            return Err(Error::InvalidConfig("ping-ack needs at least 2 nodes".into()));
        }
        if self.message_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "message_size must be >= 8 bytes, got {}",
                self.message_size
            )));
        }
        Ok(())
    }
}

enum Role {
    Sender { peer: WorkerRef, remaining: u64 },
    Receiver { received: u64 },
    Bystander,
}

struct PingAckDriver {
    role: Role,
    expected: u64,
    size: usize,
    acks: u64,
    last_ack_at: u64,
}

impl Driver for PingAckDriver {
    fn produce(&mut self, ctx: &mut WorkerCtx<'_>) -> Result<Activity> {
        if let Role::Sender { peer, remaining } = &mut self.role {
            if *remaining > 0 {
                *remaining -= 1;
                ctx.send(*peer, Payload::zeroed(self.size))?;
                return Ok(Activity::Busy);
            }
        }
        Ok(Activity::Idle)
    }

    fn deliver(&mut self, ctx: &mut WorkerCtx<'_>, item: Item) -> Result<()> {
        if item.payload.word(0) == 1 {
            self.acks += 1;
            self.last_ack_at = ctx.now();
            return Ok(());
        }
        match &mut self.role {
            Role::Receiver { received } => {
                *received += 1;
                if *received == self.expected {
                    let mut ack = vec![0u8; self.size];
                    ack[0] = 1;
                    ctx.send(WorkerRef(0), Payload::from_bytes(&ack))?;
                }
                Ok(())
            }
            _ => Err(Error::Internal(format!("payload delivered to non-receiver {}", item.dest))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PingAckOutcome {
    pub metrics: RunMetrics,
    pub acks: u64,
    /// Time of the last ack, measured from the start of the run.
    pub completion_ns: u64,
    pub payload_messages: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PingAckReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub acks: u64,
    pub completion_ns: u64,
    /// Payload items per second of completion time.
    pub throughput_per_s: Option<f64>,
    pub egress: Vec<EgressStats>,
}

impl PingAckOutcome {
    pub fn throughput_per_ns(&self) -> Option<f64> {
        (self.completion_ns > 0).then(|| self.payload_messages as f64 / self.completion_ns as f64)
    }

    pub fn report(&self) -> Result<PingAckReport> {
        Ok(PingAckReport {
            summary: self.metrics.summarize()?,
            acks: self.acks,
            completion_ns: self.completion_ns,
            throughput_per_s: self.throughput_per_ns().map(|t| t * 1e9),
            egress: self.metrics.egress.clone(),
        })
    }

    pub fn verify(&self) -> Result<()> {
        let senders = self.metrics.topo.total_workers() / self.metrics.topo.num_nodes();
        if self.acks != senders as u64 {
            return Err(Error::OracleMismatch(format!("{} acks, expected {senders}", self.acks)));
        }
        Ok(())
    }
}

pub fn run_pingack(spec: &PingAckSpec, cfg: &BenchConfig) -> Result<PingAckOutcome> {
    spec.validate(&cfg.topo)?;
    let per_node = cfg.topo.total_workers() / cfg.topo.num_nodes();
    let drivers = (0..cfg.topo.total_workers())
        .map(|u| PingAckDriver {
            role: if u < per_node {
                Role::Sender {
                    peer: WorkerRef(u + per_node),
                    remaining: spec.messages_per_worker,
                }
            } else if u < 2 * per_node {
                Role::Receiver { received: 0 }
            } else {
                Role::Bystander
            },
            expected: spec.messages_per_worker,
            size: spec.message_size,
            acks: 0,
            last_ack_at: 0,
        })
        .collect();
    let done = execute(cfg, spec.message_size, true, drivers)?;
    let first = &done.drivers[0];
    Ok(PingAckOutcome {
        acks: first.acks,
        completion_ns: first.last_ack_at,
        payload_messages: spec.messages_per_worker * per_node as u64,
        metrics: done.metrics,
    })
}
