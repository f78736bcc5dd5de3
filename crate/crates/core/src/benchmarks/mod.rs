//! Workload drivers with their correctness oracles.

pub mod histogram;
pub mod ig;
pub mod phold;
pub mod pingack;
pub mod sssp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::runtime::{spawn, Driver, Finished, RuntimeConfig};
use crate::schemes::{Aggregator, SchemeKind};
use crate::topology::Topology;

pub use histogram::{histogram_oracle, run_histogram, HistogramOutcome, HistogramReport, HistogramSpec};
pub use ig::{run_ig, IgOutcome, IgReport, IgSpec};
pub use phold::{phold_oracle, run_phold, PholdOutcome, PholdReport, PholdSpec};
pub use pingack::{run_pingack, PingAckOutcome, PingAckReport, PingAckSpec};
pub use sssp::{run_sssp, Graph, SsspOutcome, SsspReport, SsspSpec, INF};

/// Scheme, buffer size, topology and runtime settings shared by all workloads.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub scheme: SchemeKind,
    pub g: usize,
    pub topo: Topology,
    pub runtime: RuntimeConfig,
    /// Age after which a partially filled buffer is sent anyway.
    pub flush_timeout_ns: Option<u64>,
}

impl BenchConfig {
    pub fn new(scheme: SchemeKind, g: usize, topo: Topology) -> Self {
        BenchConfig {
            scheme,
            g,
            topo,
            runtime: RuntimeConfig::default(),
            flush_timeout_ns: None,
        }
    }
}

fn execute<D: Driver + 'static>(cfg: &BenchConfig, item_size: usize, flush_on_idle: bool, drivers: Vec<D>) -> Result<Finished<D>> {
    let mut agg = Aggregator::new(cfg.scheme, cfg.topo, cfg.g, item_size)?;
    agg.set_auto_flush(flush_on_idle, cfg.flush_timeout_ns);
    spawn(agg, cfg.runtime.clone(), drivers)?.await_quiescence()
}

/// Random stream of one worker. Streams depend only on the seed and the
/// worker id, not on the topology shape.
pub fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker as u64);
    rng
}

/// Balanced block partition of `total` indices over `parts` owners.
pub fn block_range(part: usize, total: usize, parts: usize) -> std::ops::Range<usize> {
    part * total / parts..(part + 1) * total / parts
}

/// Owner of `index` under [`block_range`].
pub fn block_owner(index: usize, total: usize, parts: usize) -> usize {
    ((index + 1) * parts - 1) / total
}

/// FNV-1a over little-endian words; a compact fingerprint of result tables.
pub fn digest(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blocks_example() {
        assert_eq!(block_range(0, 10, 3), 0..3);
        assert_eq!(block_range(1, 10, 3), 3..6);
        assert_eq!(block_range(2, 10, 3), 6..10);
    }

    proptest! {
        #[test]
        fn owner_matches_range(parts in 1usize..64, extra in 0usize..500) {
            let total = parts + extra;
            for part in 0..parts {
                for i in block_range(part, total, parts) {
                    prop_assert_eq!(block_owner(i, total, parts), part);
                }
            }
            prop_assert_eq!(block_range(parts - 1, total, parts).end, total);
        }
    }
}
