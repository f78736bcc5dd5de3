//! Speculative single-source shortest paths with a distance threshold window.
//!
//! Each worker owns a block of vertices. Relaxations below the current
//! threshold are sent right away; the rest wait until the run goes quiet, at
//! which point every worker raises its threshold by `delta` and releases what
//! now falls inside the window.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{RunMetrics, RunSummary};
use crate::runtime::{Activity, Driver, PhaseVote, WorkerCtx};
use crate::topology::{Item, Payload, Topology, WorkerRef};

use super::{block_owner, block_range, digest, execute, worker_rng, BenchConfig};

pub const ITEM_SIZE: usize = 16;

/// Distance of an unreachable vertex.
pub const INF: u64 = u64::MAX;

/// Weighted directed graph in compressed adjacency form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<u32>,
}

impl Graph {
    pub fn from_edges(vertices: usize, edges: &[(u32, u32, u32)]) -> Result<Self> {
        if vertices > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!("{vertices} vertices do not fit u32 ids")));
        }
        let mut offsets = vec![0usize; vertices + 1];
        for &(u, v, _) in edges {
            if u as usize >= vertices || v as usize >= vertices {
                return Err(Error::InvalidConfig(format!(
                    "edge {u}->{v} outside a graph of {vertices} vertices"
                )));
            }
            offsets[u as usize + 1] += 1;
        }
        for i in 0..vertices {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0; edges.len()];
        let mut weights = vec![0; edges.len()];
        for &(u, v, w) in edges {
            let at = &mut fill[u as usize];
            targets[*at] = v;
            weights[*at] = w;
            *at += 1;
        }
        Ok(Graph {
            offsets,
            targets,
            weights,
        })
    }

    /// Random digraph where every vertex has `degree` out-edges to uniformly
    /// chosen other vertices, weights uniform in 1..=100.
    pub fn random(vertices: usize, degree: usize, seed: u64) -> Result<Self> {
        if vertices < 2 && degree > 0 {
            return Err(Error::InvalidConfig("a random graph with edges needs >= 2 vertices".into()));
        }
        let mut rng = worker_rng(seed, usize::MAX);
        let mut edges = Vec::with_capacity(vertices * degree);
        for u in 0..vertices as u32 {
            for _ in 0..degree {
                let mut v = rng.random_range(0..vertices as u32 - 1);
                if v >= u {
                    v += 1;
                }
                edges.push((u, v, rng.random_range(1..=100)));
            }
        }
        Graph::from_edges(vertices, &edges)
    }

    /// Parses `u v w` lines; blank lines and `#` comments are skipped. The
    /// vertex count is one more than the largest id.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut vertices = 0usize;
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed: Option<Vec<u32>> = fields.iter().map(|f| f.parse().ok()).collect();
            match parsed.as_deref() {
                Some(&[u, v, w]) => {
                    vertices = vertices.max(u.max(v) as usize + 1);
                    edges.push((u, v, w));
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "edge list line {}: expected `u v w`, got `{line}`",
                        no + 1
                    )))
                }
            }
        }
        Graph::from_edges(vertices, &edges)
    }

    pub fn vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edges(&self) -> usize {
        self.targets.len()
    }

    /// Out-edges of `u` as (target, weight).
    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let r = self.offsets[u]..self.offsets[u + 1];
        self.targets[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&v, &w)| (v as usize, w as u64))
    }

    pub fn dijkstra(&self, source: usize) -> Vec<u64> {
        let mut dist = vec![INF; self.vertices()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0;
        heap.push(Reverse((0u64, source)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (v, w) in self.neighbors(u) {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        dist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsspSpec {
    pub source: usize,
    /// Width of the distance window; `u64::MAX` disables deferral.
    pub delta: u64,
}

struct SsspDriver {
    graph: Arc<Graph>,
    workers: usize,
    base: usize,
    dist: Vec<u64>,
    queued: Vec<bool>,
    work: Vec<usize>,
    threshold: u64,
    delta: u64,
    /// Best deferred candidate per target vertex.
    deferred: BTreeMap<usize, u64>,
}

impl SsspDriver {
    fn owner(&self, v: usize) -> WorkerRef {
        WorkerRef(block_owner(v, self.graph.vertices(), self.workers))
    }

    fn relax(&mut self, ctx: &mut WorkerCtx<'_>, v: usize, d: u64) -> Result<()> {
        ctx.send(self.owner(v), Payload::from_words(&[v as u64, d]))?;
        Ok(())
    }
}

impl Driver for SsspDriver {
    fn produce(&mut self, ctx: &mut WorkerCtx<'_>) -> Result<Activity> {
        let Some(u) = self.work.pop() else {
            return Ok(Activity::Idle);
        };
        self.queued[u - self.base] = false;
        let du = self.dist[u - self.base];
        let graph = Arc::clone(&self.graph);
        for (v, w) in graph.neighbors(u) {
            let nd = du + w;
            if nd < self.threshold {
                self.relax(ctx, v, nd)?;
            } else {
                let best = self.deferred.entry(v).or_insert(INF);
                *best = (*best).min(nd);
            }
        }
        Ok(if self.work.is_empty() {
            Activity::Idle
        } else {
            Activity::Busy
        })
    }

    fn deliver(&mut self, ctx: &mut WorkerCtx<'_>, item: Item) -> Result<()> {
        let v = item.payload.word(0) as usize;
        let d = item.payload.word(1);
        let i = v
            .checked_sub(self.base)
            .filter(|&i| i < self.dist.len())
            .ok_or_else(|| Error::Internal(format!("vertex {v} delivered to the wrong worker")))?;
        if d < self.dist[i] {
            self.dist[i] = d;
            if !self.queued[i] {
                self.queued[i] = true;
                self.work.push(v);
            }
        } else {
            ctx.count_wasted(1);
        }
        Ok(())
    }

    fn on_quiescence(&mut self, ctx: &mut WorkerCtx<'_>) -> Result<PhaseVote> {
        if self.deferred.is_empty() {
            return Ok(PhaseVote::Done);
        }
        self.threshold = self.threshold.saturating_add(self.delta);
        let ready: Vec<(usize, u64)> = self
            .deferred
            .iter()
            .filter(|&(_, &d)| d < self.threshold)
            .map(|(&v, &d)| (v, d))
            .collect();
        for &(v, d) in &ready {
            self.deferred.remove(&v);
            // the owner would discard it anyway
            if self.owner(v) == ctx.worker() && d >= self.dist[v - self.base] {
                continue;
            }
            self.relax(ctx, v, d)?;
        }
        Ok(if ready.is_empty() {
            PhaseVote::Pending
        } else {
            PhaseVote::Released
        })
    }
}

#[derive(Debug, Clone)]
pub struct SsspOutcome {
    pub metrics: RunMetrics,
    pub distances: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SsspReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub reachable: usize,
    pub distances_digest: String,
}

impl SsspOutcome {
    pub fn report(&self) -> Result<SsspReport> {
        Ok(SsspReport {
            summary: self.metrics.summarize()?,
            reachable: self.distances.iter().filter(|&&d| d != INF).count(),
            distances_digest: format!("{:016x}", digest(self.distances.iter().copied())),
        })
    }

    /// Compares the distances with Dijkstra from the same source.
    pub fn verify(&self, graph: &Graph, spec: &SsspSpec) -> Result<()> {
        let expected = graph.dijkstra(spec.source);
        match expected.iter().zip(&self.distances).position(|(a, b)| a != b) {
            None => Ok(()),
            Some(v) => Err(Error::OracleMismatch(format!(
                "vertex {v}: distance {}, expected {}",
                self.distances[v], expected[v]
            ))),
        }
    }
}

pub fn run_sssp(graph: &Graph, spec: &SsspSpec, cfg: &BenchConfig) -> Result<SsspOutcome> {
    validate(graph, spec, &cfg.topo)?;
    let graph = Arc::new(graph.clone());
    let w = cfg.topo.total_workers();
    let n = graph.vertices();
    let delta = spec.delta.max(1);
    let drivers = (0..w)
        .map(|u| {
            let block = block_range(u, n, w);
            let mut d = SsspDriver {
                graph: Arc::clone(&graph),
                workers: w,
                base: block.start,
                dist: vec![INF; block.len()],
                queued: vec![false; block.len()],
                work: Vec::new(),
                threshold: delta,
                delta,
                deferred: BTreeMap::new(),
            };
            if block.contains(&spec.source) {
                d.dist[spec.source - block.start] = 0;
                d.queued[spec.source - block.start] = true;
                d.work.push(spec.source);
            }
            d
        })
        .collect();
    let done = execute(cfg, ITEM_SIZE, true, drivers)?;
    let distances = done.drivers.into_iter().flat_map(|d| d.dist).collect();
    Ok(SsspOutcome {
        metrics: done.metrics,
        distances,
    })
}

fn validate(graph: &Graph, spec: &SsspSpec, topo: &Topology) -> Result<()> {
    if spec.source >= graph.vertices() {
        return Err(Error::InvalidConfig(format!(
            "source {} outside a graph of {} vertices",
            spec.source,
            graph.vertices()
        )));
    }
    if graph.vertices() < topo.total_workers() {
        return Err(Error::InvalidConfig(format!(
            "{} vertices for {} workers",
            graph.vertices(),
            topo.total_workers()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_list_parsing() {
        let g = Graph::parse_edge_list("# path\n0 1 1\n1 2 1\n\n2 3 1 # tail\n").unwrap();
        assert_eq!(g.vertices(), 4);
        assert_eq!(g.edges(), 3);
        assert_eq!(g.dijkstra(0), vec![0, 1, 2, 3]);
        assert!(Graph::parse_edge_list("0 1").unwrap_err().is_usage());
        assert!(Graph::parse_edge_list("0 1 x").is_err());
    }

    #[test]
    fn random_graph_shape() {
        let g = Graph::random(50, 4, 3).unwrap();
        assert_eq!(g.edges(), 200);
        for u in 0..50 {
            assert_eq!(g.neighbors(u).count(), 4);
            assert!(g.neighbors(u).all(|(v, w)| v != u && (1..=100).contains(&w)));
        }
        assert_eq!(g, Graph::random(50, 4, 3).unwrap());
    }
}
