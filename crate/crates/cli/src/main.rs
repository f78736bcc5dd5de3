use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use nodeagg::benchmarks::*;
use nodeagg::costmodel::{self, CostInputs};
use nodeagg::sweep::{run_sweep, SweepGrid};
use nodeagg::{ClockMode, Error, RunMetrics, RunMode, RunSummary, SchemeKind, Topology};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "nodeagg", version, about = "Message aggregation workloads, sweeps and cost-model predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    #[command(flatten)]
    Bench(Bench),
    /// Cost-model predictions for one scheme.
    Predict(PredictArgs),
    /// Runs a benchmark over a grid of schemes and buffer sizes, writing CSV.
    Sweep(SweepArgs),
}

#[derive(Subcommand, Debug, Clone)]
enum Bench {
    /// Random increments to a distributed histogram.
    Histogram(HistogramArgs),
    /// Random reads from a distributed table.
    Ig(IgArgs),
    /// Speculative single-source shortest paths.
    Sssp(SsspArgs),
    /// PHOLD, counting out-of-order events.
    Phold(PholdArgs),
    /// Node 0 streams to node 1, which acks.
    Pingack(PingAckArgs),
}

/// Scheme token; `none` sends every item on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SchemeArg {
    Scheme(SchemeKind),
    Unaggregated,
}

impl FromStr for SchemeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(SchemeArg::Unaggregated);
        }
        s.parse().map(SchemeArg::Scheme).map_err(|e: Error| e.to_string())
    }
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// ww, wps, wsp, pp or none.
    #[arg(long, env = "AGG_SCHEME", default_value = "wps")]
    scheme: SchemeArg,
    /// Items per buffer.
    #[arg(long, env = "AGG_G", default_value_t = 1024)]
    g: usize,
    #[arg(long, env = "AGG_NODES", default_value_t = 2)]
    nodes: usize,
    /// Processes per node.
    #[arg(long, env = "AGG_PPN", default_value_t = 2)]
    ppn: usize,
    /// Workers per process.
    #[arg(long, env = "AGG_WPP", default_value_t = 4)]
    wpp: usize,
    #[arg(long, env = "AGG_ALPHA", default_value_t = 2000.0)]
    alpha: f64,
    #[arg(long, env = "AGG_BETA", default_value_t = 0.083)]
    beta: f64,
    /// Serial cost per message on the sending process's communication context.
    #[arg(long, env = "AGG_COMM_COST", default_value_t = 167)]
    comm_cost: u64,
    /// Send without a communication context.
    #[arg(long, env = "AGG_NO_COMM")]
    no_comm: bool,
    #[arg(long, env = "AGG_INSERT_NS", default_value_t = 10)]
    insert_ns: u64,
    #[arg(long, env = "AGG_HANDLE_NS", default_value_t = 10)]
    handle_ns: u64,
    /// Bytes added to every message.
    #[arg(long, env = "AGG_HEADER_BYTES", default_value_t = 0)]
    header_bytes: u64,
    /// Flush buffers older than this.
    #[arg(long, env = "AGG_FLUSH_TIMEOUT_NS")]
    flush_timeout_ns: Option<u64>,
    /// threaded or sequential.
    #[arg(long, env = "AGG_MODE", default_value = "sequential")]
    mode: String,
    /// virtual or wall.
    #[arg(long, env = "AGG_CLOCK", default_value = "virtual")]
    clock: String,
    #[arg(long, env = "AGG_SEED", default_value_t = 0)]
    seed: u64,
    /// Give up after this long without reaching quiescence.
    #[arg(long, env = "AGG_TIMEOUT_MS", default_value_t = 300_000)]
    timeout_ms: u64,
    /// Write the JSON summary here instead of stdout.
    #[arg(long, env = "AGG_OUTPUT")]
    output: Option<PathBuf>,
    /// Write one JSON line per message here.
    #[arg(long, env = "AGG_TRACE")]
    trace: Option<PathBuf>,
}

impl RunArgs {
    fn topology(&self) -> nodeagg::Result<Topology> {
        Topology::new(self.nodes, self.ppn, self.wpp)
    }

    fn config(&self, topo: Topology) -> nodeagg::Result<BenchConfig> {
        let (scheme, g) = match self.scheme {
            SchemeArg::Scheme(s) => (s, self.g),
            SchemeArg::Unaggregated => (SchemeKind::WW, 1),
        };
        let mut cfg = BenchConfig::new(scheme, g, topo);
        let rt = &mut cfg.runtime;
        rt.mode = match RunMode::from_str(&self.mode)? {
            RunMode::Sequential { .. } => RunMode::Sequential { seed: self.seed },
            m => m,
        };
        rt.transport.alpha_ns = self.alpha;
        rt.transport.beta_ns_per_byte = self.beta;
        rt.transport.comm_cost_ns = self.comm_cost;
        rt.transport.comm_enabled = !self.no_comm;
        rt.transport.clock = ClockMode::from_str(&self.clock)?;
        rt.insert_ns = self.insert_ns;
        rt.handle_ns = self.handle_ns;
        rt.header_bytes = self.header_bytes;
        rt.trace = self.trace.is_some();
        rt.timeout = Duration::from_millis(self.timeout_ms);
        cfg.flush_timeout_ns = self.flush_timeout_ns;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct HistogramArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, env = "AGG_UPDATES", default_value_t = 100_000)]
    updates: u64,
    /// Bins; defaults to 1024 per worker.
    #[arg(long, env = "AGG_TABLE_SIZE")]
    table_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct IgArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, env = "AGG_REQUESTS", default_value_t = 10_000)]
    requests: u64,
    /// Table entries; defaults to 1024 per worker.
    #[arg(long, env = "AGG_TABLE_SIZE")]
    table_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct SsspArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Edge list with `u v w` lines; a random graph is generated otherwise.
    #[arg(long, env = "AGG_GRAPH")]
    graph: Option<PathBuf>,
    #[arg(long, env = "AGG_VERTICES", default_value_t = 1000)]
    vertices: usize,
    #[arg(long, env = "AGG_DEGREE", default_value_t = 8)]
    degree: usize,
    #[arg(long, env = "AGG_SOURCE", default_value_t = 0)]
    source: usize,
    /// Distance window released per phase.
    #[arg(long, env = "AGG_DELTA", default_value_t = 50)]
    delta: u64,
}

#[derive(Args, Debug, Clone)]
struct PholdArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, env = "AGG_LPS", default_value_t = 4)]
    lps: usize,
    /// Initial events per LP.
    #[arg(long, env = "AGG_EVENTS", default_value_t = 4)]
    events: usize,
    #[arg(long, env = "AGG_MEAN_INCREMENT", default_value_t = 1000.0)]
    mean_increment: f64,
    #[arg(long, env = "AGG_LOOKAHEAD", default_value_t = 0)]
    lookahead: u64,
    #[arg(long, env = "AGG_END_TIME", default_value_t = 100_000)]
    end_time: u64,
    /// Modelled compute per processed event.
    #[arg(long, env = "AGG_EVENT_NS", default_value_t = 1000)]
    event_ns: u64,
}

#[derive(Args, Debug, Clone)]
struct PingAckArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, env = "AGG_MESSAGES", default_value_t = 1000)]
    messages: u64,
    /// Item size in bytes.
    #[arg(long, env = "AGG_SIZE", default_value_t = 8)]
    size: usize,
    /// Processes per node to compare, keeping workers per node at ppn*wpp.
    #[arg(long, env = "AGG_PPN_LIST", value_delimiter = ',')]
    ppn_list: Vec<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, env = "AGG_SCHEME", default_value = "wps")]
    scheme: SchemeKind,
    #[arg(long, env = "AGG_G", default_value_t = 1024)]
    g: u64,
    /// Bytes per item.
    #[arg(long, default_value_t = 8)]
    m: u64,
    /// Total processes.
    #[arg(long = "N", default_value_t = 1)]
    n: u64,
    /// Workers per process.
    #[arg(long, default_value_t = 1)]
    t: u64,
    /// Items per source scope.
    #[arg(long, default_value_t = 0)]
    z: u64,
    #[arg(long, env = "AGG_ALPHA", default_value_t = 2000.0)]
    alpha: f64,
    #[arg(long, env = "AGG_BETA", default_value_t = 0.083)]
    beta: f64,
    /// Buffer fill rate in items per ns.
    #[arg(long, default_value_t = 0.0)]
    r: f64,
    /// Per-message processing overhead.
    #[arg(long, default_value_t = 0.0)]
    o: f64,
}

/// Comma-separated values; the empty string is the empty list.
#[derive(Debug, Clone)]
struct List<T>(Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| v.parse().map_err(|e| format!("`{v}`: {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Schemes to run; "" for none.
    #[arg(long, env = "AGG_SCHEMES", default_value = "ww,wps,wsp,pp")]
    schemes: List<SchemeKind>,
    /// Buffer sizes to run; "" for none.
    #[arg(long, env = "AGG_GS", default_value = "512,1024,2048,4096")]
    gs: List<usize>,
    /// CSV destination; stdout if absent.
    #[arg(long, env = "AGG_CSV")]
    csv: Option<PathBuf>,
    #[command(subcommand)]
    bench: Bench,
}

#[derive(Serialize)]
struct PingAckSweep {
    runs: Vec<PingAckReport>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_usage() => 2,
        Error::OracleMismatch(_) => 3,
        Error::Timeout { .. } => 4,
        _ => 1,
    }
}

fn io_err(e: io::Error) -> Error {
    Error::Internal(format!("i/o: {e}"))
}

fn emit<T: Serialize>(value: &T, output: Option<&PathBuf>) -> nodeagg::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    match output {
        Some(path) => std::fs::write(path, text + "\n").map_err(io_err),
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}").map_err(io_err)
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> nodeagg::Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| Error::Internal(e.to_string()))
}

fn write_trace(metrics: &RunMetrics, path: Option<&PathBuf>) -> nodeagg::Result<()> {
    if let Some(path) = path {
        let mut f = BufWriter::new(File::create(path).map_err(io_err)?);
        metrics.write_trace(&mut f).map_err(io_err)?;
        f.flush().map_err(io_err)?;
    }
    Ok(())
}

fn table_size(explicit: Option<usize>, topo: &Topology) -> usize {
    explicit.unwrap_or(topo.total_workers() * 1024)
}

fn load_graph(args: &SsspArgs) -> nodeagg::Result<Graph> {
    match &args.graph {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("reading {}: {e}", path.display())))?;
            Graph::parse_edge_list(&text)
        }
        None => Graph::random(args.vertices, args.degree, args.run.seed),
    }
}

impl Bench {
    fn run_args(&self) -> &RunArgs {
        match self {
            Bench::Histogram(a) => &a.run,
            Bench::Ig(a) => &a.run,
            Bench::Sssp(a) => &a.run,
            Bench::Phold(a) => &a.run,
            Bench::Pingack(a) => &a.run,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Bench::Histogram(_) => "histogram",
            Bench::Ig(_) => "ig",
            Bench::Sssp(_) => "sssp",
            Bench::Phold(_) => "phold",
            Bench::Pingack(_) => "pingack",
        }
    }

    /// Runs and verifies one configuration; writes the trace if requested.
    fn execute(&self, cfg: &BenchConfig) -> nodeagg::Result<(RunSummary, serde_json::Value)> {
        let (metrics, report): (RunMetrics, serde_json::Value) = match self {
            Bench::Histogram(a) => {
                let spec = HistogramSpec {
                    updates_per_worker: a.updates,
                    table_size: table_size(a.table_size, &cfg.topo),
                    seed: a.run.seed,
                };
                let out = run_histogram(&spec, cfg)?;
                out.verify(&spec)?;
                let r = to_json(&out.report()?)?;
                (out.metrics, r)
            }
            Bench::Ig(a) => {
                let spec = IgSpec {
                    requests_per_worker: a.requests,
                    table_size: table_size(a.table_size, &cfg.topo),
                    seed: a.run.seed,
                };
                let out = run_ig(&spec, cfg)?;
                out.verify(&spec)?;
                let r = to_json(&out.report()?)?;
                (out.metrics, r)
            }
            Bench::Sssp(a) => {
                let graph = load_graph(a)?;
                let spec = SsspSpec {
                    source: a.source,
                    delta: a.delta,
                };
                let out = run_sssp(&graph, &spec, cfg)?;
                out.verify(&graph, &spec)?;
                let r = to_json(&out.report()?)?;
                (out.metrics, r)
            }
            Bench::Phold(a) => {
                let spec = PholdSpec {
                    lps_per_worker: a.lps,
                    initial_events_per_lp: a.events,
                    mean_increment: a.mean_increment,
                    lookahead: a.lookahead,
                    end_time: a.end_time,
                    event_ns: a.event_ns,
                    seed: a.run.seed,
                };
                let out = run_phold(&spec, cfg)?;
                out.verify(&spec)?;
                let r = to_json(&out.report()?)?;
                (out.metrics, r)
            }
            Bench::Pingack(a) => {
                let spec = PingAckSpec {
                    messages_per_worker: a.messages,
                    message_size: a.size,
                };
                let out = run_pingack(&spec, cfg)?;
                out.verify()?;
                let r = to_json(&out.report()?)?;
                (out.metrics, r)
            }
        };
        write_trace(&metrics, self.run_args().trace.as_ref())?;
        Ok((metrics.summarize()?, report))
    }
}

fn run_bench(bench: &Bench) -> nodeagg::Result<()> {
    let args = bench.run_args();
    if let Bench::Pingack(a) = bench {
        if !a.ppn_list.is_empty() {
            let per_node = args.ppn * args.wpp;
            let mut runs = Vec::new();
            for &ppn in &a.ppn_list {
                if ppn == 0 || !per_node.is_multiple_of(ppn) {
                    return Err(Error::InvalidConfig(format!(
                        "ppn {ppn} does not divide {per_node} workers per node"
                    )));
                }
                let cfg = args.config(Topology::new(args.nodes, ppn, per_node / ppn)?)?;
                let spec = PingAckSpec {
                    messages_per_worker: a.messages,
                    message_size: a.size,
                };
                let out = run_pingack(&spec, &cfg)?;
                out.verify()?;
                runs.push(out.report()?);
            }
            return emit(&PingAckSweep { runs }, args.output.as_ref());
        }
    }
    let cfg = args.config(args.topology()?)?;
    let (_, report) = bench.execute(&cfg)?;
    emit(&report, args.output.as_ref())
}

fn run_predict(a: &PredictArgs) -> nodeagg::Result<()> {
    let inputs = CostInputs {
        g: a.g,
        m: a.m,
        n: a.n,
        t: a.t,
        z: a.z,
        alpha_ns: a.alpha,
        beta_ns_per_byte: a.beta,
        r: a.r,
        o_ns: a.o,
    };
    emit(&costmodel::predict(a.scheme, &inputs)?, None)
}

fn run_sweep_cmd(a: &SweepArgs) -> nodeagg::Result<()> {
    let grid = SweepGrid {
        schemes: a.schemes.0.clone(),
        gs: a.gs.0.clone(),
    };
    let args = a.bench.run_args();
    let topo = args.topology()?;
    let base = args.config(topo)?;
    let run = |scheme, g| {
        let mut cfg = base.clone();
        cfg.scheme = scheme;
        cfg.g = g;
        a.bench.execute(&cfg).map(|(summary, _)| summary)
    };
    let rows = match &a.csv {
        Some(path) => run_sweep(a.bench.name(), &grid, File::create(path).map_err(io_err)?, run)?,
        None => run_sweep(a.bench.name(), &grid, io::stdout().lock(), run)?,
    };
    eprintln!("{rows} rows");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bench(b) => run_bench(b),
        Command::Predict(a) => run_predict(a),
        Command::Sweep(a) => run_sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
