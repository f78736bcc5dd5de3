use std::time::Duration;

use nodeagg::benchmarks::{run_histogram, BenchConfig, HistogramSpec};
use nodeagg::costmodel::{self, CostInputs};
use nodeagg::metrics::CsvRow;
use nodeagg::sweep::{run_sweep, SweepGrid};
use nodeagg::{
    spawn, Activity, Aggregator, ClockMode, Driver, Error, Item, PhaseVote, RunMode, RuntimeConfig, SchemeKind,
    Topology, WorkerCtx,
};
use proptest::prelude::*;

#[derive(Debug)]
struct Quiet;

impl Driver for Quiet {
    fn produce(&mut self, _ctx: &mut WorkerCtx<'_>) -> nodeagg::Result<Activity> {
        Ok(Activity::Idle)
    }

    fn deliver(&mut self, _ctx: &mut WorkerCtx<'_>, _item: Item) -> nodeagg::Result<()> {
        Ok(())
    }
}

/// Never finishes: always claims deferred work at quiescence.
#[derive(Debug)]
struct Stuck;

impl Driver for Stuck {
    fn produce(&mut self, _ctx: &mut WorkerCtx<'_>) -> nodeagg::Result<Activity> {
        Ok(Activity::Idle)
    }

    fn deliver(&mut self, _ctx: &mut WorkerCtx<'_>, _item: Item) -> nodeagg::Result<()> {
        Ok(())
    }

    fn on_quiescence(&mut self, _ctx: &mut WorkerCtx<'_>) -> nodeagg::Result<PhaseVote> {
        Ok(PhaseVote::Pending)
    }
}

/// Busy forever.
#[derive(Debug)]
struct Endless;

impl Driver for Endless {
    fn produce(&mut self, ctx: &mut WorkerCtx<'_>) -> nodeagg::Result<Activity> {
        ctx.charge(1);
        Ok(Activity::Busy)
    }

    fn deliver(&mut self, _ctx: &mut WorkerCtx<'_>, _item: Item) -> nodeagg::Result<()> {
        Ok(())
    }
}

fn topo() -> Topology {
    Topology::new(2, 1, 2).unwrap()
}

fn agg() -> Aggregator {
    Aggregator::new(SchemeKind::WPs, topo(), 8, 8).unwrap()
}

#[test]
fn missing_driver_is_missing_sink() {
    let err = spawn(agg(), RuntimeConfig::default(), vec![Quiet, Quiet, Quiet]).unwrap_err();
    assert!(matches!(err, Error::MissingSink(3)), "{err}");
    let err = spawn(agg(), RuntimeConfig::default(), (0..5).map(|_| Quiet).collect()).unwrap_err();
    assert!(err.is_usage());
}

#[test]
fn sequential_wall_clock_is_rejected() {
    let mut cfg = RuntimeConfig {
        mode: RunMode::Sequential { seed: 0 },
        ..RuntimeConfig::default()
    };
    cfg.transport.clock = ClockMode::Wall;
    let err = spawn(agg(), cfg, (0..4).map(|_| Quiet).collect()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
}

#[test]
fn context_counts() {
    let h = spawn(agg(), RuntimeConfig::default(), (0..4).map(|_| Quiet).collect()).unwrap();
    assert_eq!((h.worker_contexts(), h.comm_contexts()), (4, 2));
    let done = h.await_quiescence().unwrap();
    assert_eq!(done.metrics.totals.messages_sent, 0);
    assert_eq!(done.metrics.summarize().unwrap().produced, 0);
}

#[test]
fn idle_run_summarizes_to_empty_latency() {
    let done = spawn(agg(), RuntimeConfig::default(), (0..4).map(|_| Quiet).collect())
        .unwrap()
        .await_quiescence()
        .unwrap();
    let s = done.metrics.summarize().unwrap();
    assert_eq!(s.item_latency.mean_ns, None);
    assert_eq!(s.item_latency.max, None);
}

#[test]
fn endless_deferral_is_reported() {
    let err = spawn(agg(), RuntimeConfig::default(), (0..4).map(|_| Stuck).collect())
        .unwrap()
        .await_quiescence()
        .unwrap_err();
    assert!(matches!(err, Error::Internal(_)), "{err}");
}

#[test]
fn busy_run_times_out_with_diagnostics() {
    for mode in [RunMode::Sequential { seed: 0 }, RunMode::Threaded] {
        let cfg = RuntimeConfig {
            mode,
            timeout: Duration::from_millis(50),
            ..RuntimeConfig::default()
        };
        let err = spawn(agg(), cfg, (0..4).map(|_| Endless).collect())
            .unwrap()
            .await_quiescence()
            .unwrap_err();
        match err {
            Error::Timeout { limit_ms, diagnostics } => {
                assert_eq!(limit_ms, 50);
                assert_eq!(diagnostics.produced, diagnostics.delivered);
            }
            other => panic!("{mode}: expected timeout, got {other}"),
        }
    }
}

#[test]
fn wall_clock_threaded_run_completes() {
    let spec = HistogramSpec {
        updates_per_worker: 2_000,
        table_size: 256,
        seed: 2,
    };
    let mut cfg = BenchConfig::new(SchemeKind::PP, 64, Topology::new(2, 2, 2).unwrap());
    cfg.runtime.mode = RunMode::Threaded;
    cfg.runtime.transport.clock = ClockMode::Wall;
    let out = run_histogram(&spec, &cfg).unwrap();
    out.verify(&spec).unwrap();
    assert_eq!(out.metrics.clock, ClockMode::Wall);
}

fn histogram_cell(scheme: SchemeKind, g: usize) -> nodeagg::Result<nodeagg::RunSummary> {
    let spec = HistogramSpec {
        updates_per_worker: 500,
        table_size: 64,
        seed: 0,
    };
    let mut cfg = BenchConfig::new(scheme, g, Topology::new(2, 1, 2).unwrap());
    cfg.runtime.mode = RunMode::Sequential { seed: 0 };
    run_histogram(&spec, &cfg)?.metrics.summarize()
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let grid = SweepGrid {
        schemes: SchemeKind::ALL.to_vec(),
        gs: vec![16, 64],
    };
    let mut out = Vec::new();
    let rows = run_sweep("histogram", &grid, &mut out, histogram_cell).unwrap();
    assert_eq!(rows, 8);
    let mut reader = csv::Reader::from_reader(out.as_slice());
    assert_eq!(reader.headers().unwrap(), CsvRow::HEADER.as_slice());
    let recs: Vec<CsvRow> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(recs.len(), 8);
    let cells: Vec<_> = recs.iter().map(|r| (r.scheme.clone(), r.g)).collect();
    let expected: Vec<_> = grid.cells().map(|(s, g)| (s.token().to_string(), g)).collect();
    assert_eq!(cells, expected);
    assert!(recs.iter().all(|r| r.benchmark == "histogram" && r.produced == 2_000));
}

#[test]
fn empty_sweep_writes_header_only() {
    let mut out = Vec::new();
    let rows = run_sweep("histogram", &SweepGrid::default(), &mut out, histogram_cell).unwrap();
    assert_eq!(rows, 0);
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(text.trim_end(), CsvRow::HEADER.join(","));
}

#[test]
fn failing_cell_keeps_finished_rows() {
    let grid = SweepGrid {
        schemes: vec![SchemeKind::WW],
        gs: vec![16, 0, 64],
    };
    let mut out = Vec::new();
    let err = run_sweep("histogram", &grid, &mut out, histogram_cell).unwrap_err();
    assert!(err.is_usage());
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 2);
}

proptest! {
    #[test]
    fn unaggregated_send_cost_is_per_item(z in 0u64..100_000, m in 1u64..64) {
        let i = CostInputs { g: 1, m, z, ..CostInputs::default() };
        let expected = z as f64 * (i.alpha_ns + i.beta_ns_per_byte * m as f64);
        prop_assert!((costmodel::send_cost(&i) - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn larger_buffers_never_cost_more(z in 0u64..100_000, g in 1u64..4096) {
        let a = CostInputs { g, z, ..CostInputs::default() };
        let b = CostInputs { g: g + 1, ..a };
        prop_assert!(costmodel::send_cost(&b) <= costmodel::send_cost(&a));
    }

    #[test]
    fn bounds_are_ordered(
        z in 0u64..1_000_000,
        g in 1u64..8192,
        n in 1u64..64,
        t in 1u64..64,
        scheme in prop::sample::select(SchemeKind::ALL.to_vec()),
    ) {
        let i = CostInputs { g, z, n, t, ..CostInputs::default() };
        let b = costmodel::message_bounds(scheme, &i);
        prop_assert!(b.lower as f64 <= b.upper);
        prop_assert!(b.contains(b.lower));
        prop_assert_eq!(costmodel::grouping_cost(g, t), g + t);
    }

    #[test]
    fn memory_matches_layout(
        g in 1u64..4096,
        m in 1u64..64,
        n in 1u64..32,
        t in 1u64..16,
        scheme in prop::sample::select(SchemeKind::ALL.to_vec()),
    ) {
        let i = CostInputs { g, m, n, t, ..CostInputs::default() };
        let mem = costmodel::memory_overhead(scheme, &i);
        let per_core = match scheme {
            SchemeKind::WW => Some(g * m * n * t),
            SchemeKind::WPs | SchemeKind::WsP => Some(g * m * n),
            SchemeKind::PP => None,
        };
        prop_assert_eq!(mem.per_core_bytes, per_core);
        prop_assert_eq!(mem.per_process_bytes, per_core.map_or(g * m * n, |c| c * t));
    }
}
