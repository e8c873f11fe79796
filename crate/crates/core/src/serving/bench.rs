use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::server::{Server, ServerOptions};
use super::worker::WorkerSettings;
use crate::error::{Error, Result};
use crate::metrics::{ThroughputReport, TokenCounters};
use crate::model::Model;
use crate::scheduler::{ClockMode, Engine, EngineConfig, RequestId, RequestOutput, SimulatedCost, TraceEntry};
use crate::topology::{aggregate, dispatch, ServerReport, WorkerPlan};

pub const TABLE_HEADERS: [&str; 6] = [
    "vCPU",
    "Model",
    "Number of requests",
    "Processed Token Throughput (Tokens/Sec)",
    "Generated Token Throughput (Tokens/Sec)",
    "Execution time(mm:ss)",
];

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub plan: WorkerPlan,
    /// Sequences each worker runs concurrently; overrides `engine.max_batch`.
    pub parallel: usize,
    pub engine: EngineConfig,
    pub total_tiles: usize,
    pub tile_size: usize,
    pub clock: ClockMode,
    pub cost: SimulatedCost,
    pub pin: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub parallel: usize,
    pub server: ServerReport,
    /// Ordered by request id, which is the trace line index.
    pub outputs: Vec<RequestOutput>,
    /// Worker chosen for each request, by request id.
    pub assignments: Vec<usize>,
}

/// Replay `trace` across the planned workers and wait for every request.
pub fn run_bench(model: Arc<Model>, trace: &[TraceEntry], options: &BenchOptions) -> Result<BenchResult> {
    if options.parallel == 0 {
        return Err(Error::InvalidConfig("parallel must be at least 1".into()));
    }
    if options.plan.workers.is_empty() {
        return Err(Error::InfeasiblePlan("no workers planned".into()));
    }
    let engine = EngineConfig { max_batch: options.parallel, ..options.engine };
    match options.clock {
        ClockMode::Simulated => run_simulated(model, trace, options, engine),
        ClockMode::Wall => run_wall(model, trace, options, engine),
    }
}

struct SimWorker {
    engine: Engine,
    clock_us: u64,
}

/// Single-threaded event loop: each worker has its own clock advanced by
/// the cost model; the earliest event runs next, arrivals before steps on
/// ties and lower worker ids first among steps.
fn run_simulated(
    model: Arc<Model>,
    trace: &[TraceEntry],
    options: &BenchOptions,
    engine: EngineConfig,
) -> Result<BenchResult> {
    let mut workers = options
        .plan
        .workers
        .iter()
        .map(|_| {
            Ok(SimWorker {
                engine: Engine::new(model.clone(), engine, options.total_tiles, options.tile_size)?,
                clock_us: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outputs = Vec::with_capacity(trace.len());
    let mut assignments = Vec::with_capacity(trace.len());
    let mut next = 0;
    loop {
        let busy = workers
            .iter()
            .enumerate()
            .filter(|(_, w)| !w.engine.is_idle())
            .min_by_key(|&(i, w)| (w.clock_us, i))
            .map(|(i, w)| (i, w.clock_us));
        let arrival = trace.get(next).map(|e| e.arrival_ms * 1000);
        let arrival_first = match (arrival, busy) {
            (None, None) => break,
            (Some(at), Some((_, t))) => at <= t,
            (Some(_), None) => true,
            (None, Some(_)) => false,
        };
        if arrival_first {
            let at = arrival.expect("arrival pending");
            let loads: Vec<u64> = workers.iter().map(|w| w.engine.outstanding_tokens() as u64).collect();
            let k = dispatch(&loads).expect("workers exist");
            let w = &mut workers[k];
            if w.engine.is_idle() {
                w.clock_us = w.clock_us.max(at);
            }
            w.engine.submit_as(RequestId(next as u64), trace[next].to_request())?;
            assignments.push(k);
            next += 1;
        } else {
            let (k, _) = busy.expect("busy worker");
            let w = &mut workers[k];
            let outcome = w.engine.step()?;
            w.clock_us += options.cost.step_cost_us(&outcome);
            outputs.extend(w.engine.drain_finished());
        }
    }
    let reports: Vec<ThroughputReport> =
        workers.iter().map(|w| w.engine.counters().report(w.clock_us as f64 / 1e6)).collect();
    outputs.sort_by_key(|o| o.id);
    Ok(BenchResult { parallel: options.parallel, server: aggregate(&reports), outputs, assignments })
}

fn run_wall(model: Arc<Model>, trace: &[TraceEntry], options: &BenchOptions, engine: EngineConfig) -> Result<BenchResult> {
    let server = Server::start(
        model,
        ServerOptions {
            plan: options.plan.clone(),
            worker: WorkerSettings {
                engine,
                total_tiles: options.total_tiles,
                tile_size: options.tile_size,
                pin: options.pin,
            },
            max_new_tokens_cap: usize::MAX,
            queue_limit: u64::MAX,
        },
    )?;
    let baseline: Vec<TokenCounters> = server.worker_snapshots().iter().map(|s| s.counters).collect();
    let start = Instant::now();
    let mut pending = Vec::with_capacity(trace.len());
    let mut assignments = Vec::with_capacity(trace.len());
    for entry in trace {
        let due = Duration::from_millis(entry.arrival_ms);
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        let (_, worker, rx) = server.submit(entry.to_request())?;
        assignments.push(worker);
        pending.push(rx);
    }
    let mut outputs = Vec::with_capacity(trace.len());
    for rx in pending {
        outputs.push(rx.blocking_recv().map_err(|_| Error::WorkerUnavailable)??);
    }
    let wall = start.elapsed().as_secs_f64();
    let reports: Vec<ThroughputReport> = server
        .worker_snapshots()
        .iter()
        .zip(&baseline)
        .map(|(s, b)| {
            let c = s.counters;
            ThroughputReport::new(
                c.processed_tokens - b.processed_tokens,
                c.generated_tokens - b.generated_tokens,
                c.request_count - b.request_count,
                wall,
            )
        })
        .collect();
    outputs.sort_by_key(|o| o.id);
    Ok(BenchResult { parallel: options.parallel, server: aggregate(&reports), outputs, assignments })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub vcpu: usize,
    pub model: String,
    pub parallel: usize,
    #[serde(flatten)]
    pub report: ThroughputReport,
    pub workers: Vec<ThroughputReport>,
}

impl BenchRow {
    pub fn new(vcpu: usize, model: impl Into<String>, result: &BenchResult) -> Self {
        Self {
            vcpu,
            model: model.into(),
            parallel: result.parallel,
            report: result.server.aggregate,
            workers: result.server.workers.clone(),
        }
    }
}

/// Pipe-separated table, one row per entry. The model cell carries the
/// parallelism so sweep rows stay distinguishable.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = TABLE_HEADERS.join(" | ");
    out.push('\n');
    for row in rows {
        let r = &row.report;
        let cells = [
            row.vcpu.to_string(),
            format!("{} (parallel {})", row.model, row.parallel),
            r.request_count.to_string(),
            format!("{:.2}", r.processed_tok_per_s),
            format!("{:.2}", r.generated_tok_per_s),
            r.execution_time_mmss(),
        ];
        out.push_str(&cells.join(" | "));
        out.push('\n');
    }
    out
}

/// One JSON object per line, each a [`ThroughputReport`] plus row context.
pub fn format_json(rows: &[BenchRow]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}
