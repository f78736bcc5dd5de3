//! Closed-form overhead and latency formulas for the four schemes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schemes::SchemeKind;

/// Symbols of the analytic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Items per buffer.
    pub g: u64,
    /// Bytes per item.
    pub m: u64,
    /// Total processes.
    #[serde(rename = "N")]
    pub n: u64,
    /// Workers per process.
    pub t: u64,
    /// Items sent per source scope.
    pub z: u64,
    pub alpha_ns: f64,
    pub beta_ns_per_byte: f64,
    /// Buffer fill rate in items per ns.
    pub r: f64,
    /// Per-message processing overhead.
    pub o_ns: f64,
}

impl Default for CostInputs {
    fn default() -> Self {
        CostInputs {
            g: 1024,
            m: 8,
            n: 1,
            t: 1,
            z: 0,
            alpha_ns: 2000.0,
            beta_ns_per_byte: 0.083,
            r: 0.0,
            o_ns: 0.0,
        }
    }
}

impl CostInputs {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::InvalidConfig("g must be >= 1".into()));
        }
        for (name, v) in [
            ("alpha_ns", self.alpha_ns),
            ("beta_ns_per_byte", self.beta_ns_per_byte),
            ("r", self.r),
            ("o_ns", self.o_ns),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Buffer memory of a scheme. `per_core_bytes` is `None` for PP, whose
/// buffers belong to the process rather than to a worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryOverhead {
    pub per_core_bytes: Option<u64>,
    pub per_process_bytes: u64,
}

pub fn memory_overhead(kind: SchemeKind, i: &CostInputs) -> MemoryOverhead {
    let gmn = i.g * i.m * i.n;
    match kind {
        SchemeKind::WW => MemoryOverhead {
            per_core_bytes: Some(gmn * i.t),
            per_process_bytes: gmn * i.t * i.t,
        },
        SchemeKind::WPs | SchemeKind::WsP => MemoryOverhead {
            per_core_bytes: Some(gmn),
            per_process_bytes: gmn * i.t,
        },
        SchemeKind::PP => MemoryOverhead {
            per_core_bytes: None,
            per_process_bytes: gmn,
        },
    }
}

/// Range of messages one source scope can emit for `z` items. The upper
/// bound keeps the unrounded `z/g` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MessageBounds {
    pub lower: u64,
    pub upper: f64,
}

impl MessageBounds {
    pub fn contains(&self, messages: u64) -> bool {
        messages >= self.lower && messages as f64 <= self.upper
    }
}

pub fn message_bounds(kind: SchemeKind, i: &CostInputs) -> MessageBounds {
    let buffers = match kind {
        SchemeKind::WW => i.n * i.t,
        _ => i.n,
    };
    MessageBounds {
        lower: i.z.div_ceil(i.g),
        upper: i.z as f64 / i.g as f64 + buffers as f64,
    }
}

/// Transport cost of sending `z` items in full buffers.
pub fn send_cost(i: &CostInputs) -> f64 {
    i.z.div_ceil(i.g) as f64 * i.alpha_ns + i.beta_ns_per_byte * (i.m * i.z) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyPenalty {
    Bounded(f64),
    /// The buffer never fills.
    Unbounded,
}

/// Extra delay the first item into an empty buffer can see before the buffer fills.
pub fn latency_penalty(i: &CostInputs) -> LatencyPenalty {
    if i.r > 0.0 {
        LatencyPenalty::Bounded(i.g as f64 / i.r)
    } else {
        LatencyPenalty::Unbounded
    }
}

/// Counting-sort work units for grouping a batch of `g` items over `t` workers.
pub fn grouping_cost(g: u64, t: u64) -> u64 {
    g + t
}

/// All four quantities for one scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub scheme: SchemeKind,
    pub memory: MemoryOverhead,
    pub bounds: MessageBounds,
    pub send_cost_ns: f64,
    pub latency_penalty_ns: LatencyPenalty,
    pub grouping_ops: u64,
}

pub fn predict(kind: SchemeKind, i: &CostInputs) -> Result<Prediction> {
    i.validate()?;
    Ok(Prediction {
        scheme: kind,
        memory: memory_overhead(kind, i),
        bounds: message_bounds(kind, i),
        send_cost_ns: send_cost(i),
        latency_penalty_ns: latency_penalty(i),
        grouping_ops: grouping_cost(i.g, i.t),
    })
}
