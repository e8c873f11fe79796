use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::error::{Error, Result};
use crate::kv::PoolStats;
use crate::metrics::{ThroughputReport, TokenCounters};
use crate::model::Model;
use crate::scheduler::{Engine, EngineConfig, NewRequest, RequestId, RequestOutput};
use crate::topology::{pin_current_thread, WorkerSpec};

pub type Completion = oneshot::Sender<Result<RequestOutput>>;

enum Command {
    Submit { id: RequestId, request: NewRequest, reply: Completion },
    Shutdown,
}

/// What a worker publishes after every step. Immutable once published.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSnapshot {
    pub worker_id: usize,
    pub node_id: u32,
    pub threads: usize,
    pub pinned: bool,
    pub counters: TokenCounters,
    /// Rates over the worker's uptime.
    pub report: ThroughputReport,
    pub pool: PoolStats,
    pub queued: usize,
    pub running: usize,
    pub preemptions: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct WorkerSettings {
    pub engine: EngineConfig,
    pub total_tiles: usize,
    pub tile_size: usize,
    pub pin: bool,
}

/// Handle to one worker thread. The thread owns its engine and tile pool;
/// everything else goes through the command channel or the snapshot.
pub struct WorkerHandle {
    spec: WorkerSpec,
    tx: mpsc::Sender<Command>,
    snapshot: Arc<ArcSwap<WorkerSnapshot>>,
    /// Prompt-plus-budget tokens dispatched and not yet completed.
    outstanding_tokens: Arc<AtomicU64>,
    outstanding_requests: Arc<AtomicU64>,
    join: Option<JoinHandle<()>>,
}

impl WorkerHandle {
    pub fn spawn(model: Arc<Model>, spec: WorkerSpec, settings: WorkerSettings) -> Result<Self> {
        // Built here so configuration errors surface to the caller.
        let engine = Engine::new(model, settings.engine, settings.total_tiles, settings.tile_size)?;
        let initial = WorkerSnapshot {
            worker_id: spec.worker_id,
            node_id: spec.node_id,
            threads: spec.thread_count,
            pinned: false,
            counters: TokenCounters::default(),
            report: ThroughputReport::default(),
            pool: engine.pool_stats(),
            queued: 0,
            running: 0,
            preemptions: 0,
            steps: 0,
        };
        let snapshot = Arc::new(ArcSwap::from_pointee(initial));
        let outstanding_tokens = Arc::new(AtomicU64::new(0));
        let outstanding_requests = Arc::new(AtomicU64::new(0));
        let (tx, rx) = mpsc::channel();
        let state = LoopState {
            engine,
            spec: spec.clone(),
            pin: settings.pin,
            snapshot: snapshot.clone(),
            outstanding_tokens: outstanding_tokens.clone(),
            outstanding_requests: outstanding_requests.clone(),
        };
        let join = std::thread::Builder::new()
            .name(format!("tlm-worker-{}", spec.worker_id))
            .spawn(move || state.run(rx))?;
        Ok(Self { spec, tx, snapshot, outstanding_tokens, outstanding_requests, join: Some(join) })
    }

    pub fn spec(&self) -> &WorkerSpec {
        &self.spec
    }

    pub fn snapshot(&self) -> Arc<WorkerSnapshot> {
        self.snapshot.load_full()
    }

    pub fn outstanding_tokens(&self) -> u64 {
        self.outstanding_tokens.load(Ordering::Acquire)
    }

    pub fn outstanding_requests(&self) -> u64 {
        self.outstanding_requests.load(Ordering::Acquire)
    }

    /// Hand a validated request to the worker. `reply` receives the output
    /// or the reason the worker refused it.
    pub fn submit(&self, id: RequestId, request: NewRequest, reply: Completion) -> Result<()> {
        let cost = (request.prompt.len() + request.max_new_tokens) as u64;
        self.outstanding_tokens.fetch_add(cost, Ordering::AcqRel);
        self.outstanding_requests.fetch_add(1, Ordering::AcqRel);
        if self.tx.send(Command::Submit { id, request, reply }).is_err() {
            self.outstanding_tokens.fetch_sub(cost, Ordering::AcqRel);
            self.outstanding_requests.fetch_sub(1, Ordering::AcqRel);
            return Err(Error::WorkerUnavailable);
        }
        Ok(())
    }

    /// Stop after the current step and wait for the thread. Requests still
    /// in flight are answered with [`Error::WorkerUnavailable`].
    pub fn shutdown(&mut self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct LoopState {
    engine: Engine,
    spec: WorkerSpec,
    pin: bool,
    snapshot: Arc<ArcSwap<WorkerSnapshot>>,
    outstanding_tokens: Arc<AtomicU64>,
    outstanding_requests: Arc<AtomicU64>,
}

struct Pending {
    reply: Completion,
    cost: u64,
}

impl LoopState {
    fn run(mut self, rx: mpsc::Receiver<Command>) {
        let pinned = self.pin && self.pin_threads();
        let pool = match rayon::ThreadPoolBuilder::new()
            .num_threads(self.spec.thread_count)
            .thread_name({
                let id = self.spec.worker_id;
                move |i| format!("tlm-w{id}-t{i}")
            })
            .start_handler({
                let cores = self.spec.cores.clone();
                let pin = pinned;
                move |_| {
                    if pin {
                        let _ = pin_current_thread(&cores);
                    }
                }
            })
            .build()
        {
            Ok(pool) => pool,
            Err(e) => {
                tracing::error!(worker = self.spec.worker_id, "cannot start compute threads: {e}");
                return;
            }
        };
        let started = Instant::now();
        let mut pending: HashMap<RequestId, Pending> = HashMap::new();
        self.publish(started, pinned);
        'outer: loop {
            if self.engine.is_idle() {
                match rx.recv() {
                    Ok(cmd) => {
                        if !self.accept(cmd, &mut pending) {
                            break 'outer;
                        }
                    }
                    Err(_) => break 'outer,
                }
            }
            loop {
                match rx.try_recv() {
                    Ok(cmd) => {
                        if !self.accept(cmd, &mut pending) {
                            break 'outer;
                        }
                    }
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => break 'outer,
                }
            }
            if self.engine.is_idle() {
                continue;
            }
            let step = pool.install(|| self.engine.step());
            let finished = self.engine.drain_finished();
            // Counters are published before replies go out so a caller that
            // has its answer also sees it in the metrics.
            self.publish(started, pinned);
            for output in finished {
                if let Some(p) = pending.remove(&output.id) {
                    self.settle(p.cost);
                    let _ = p.reply.send(Ok(output));
                }
            }
            if let Err(e) = step {
                tracing::error!(worker = self.spec.worker_id, "step failed: {e}");
                self.fail_all(&mut pending);
            }
        }
        self.fail_all(&mut pending);
    }

    /// Returns false on shutdown.
    fn accept(&mut self, cmd: Command, pending: &mut HashMap<RequestId, Pending>) -> bool {
        match cmd {
            Command::Submit { id, request, reply } => {
                let cost = (request.prompt.len() + request.max_new_tokens) as u64;
                match self.engine.submit_as(id, request) {
                    Ok(_) => {
                        pending.insert(id, Pending { reply, cost });
                    }
                    Err(e) => {
                        self.settle(cost);
                        let _ = reply.send(Err(e));
                    }
                }
                true
            }
            Command::Shutdown => false,
        }
    }

    fn settle(&self, cost: u64) {
        self.outstanding_tokens.fetch_sub(cost, Ordering::AcqRel);
        self.outstanding_requests.fetch_sub(1, Ordering::AcqRel);
    }

    /// Drop every in-flight request and start over with an empty pool.
    fn fail_all(&mut self, pending: &mut HashMap<RequestId, Pending>) {
        for (_, p) in pending.drain() {
            self.settle(p.cost);
            let _ = p.reply.send(Err(Error::WorkerUnavailable));
        }
        if !self.engine.is_idle() {
            let ids: Vec<RequestId> =
                self.engine.queue().chain(self.engine.running()).map(|s| s.request.id).collect();
            for id in ids {
                let _ = self.engine.cancel(id);
            }
        }
    }

    fn publish(&self, started: Instant, pinned: bool) {
        let counters = self.engine.counters();
        self.snapshot.store(Arc::new(WorkerSnapshot {
            worker_id: self.spec.worker_id,
            node_id: self.spec.node_id,
            threads: self.spec.thread_count,
            pinned,
            counters,
            report: counters.report(started.elapsed().as_secs_f64()),
            pool: self.engine.pool_stats(),
            queued: self.engine.queued(),
            running: self.engine.running().len(),
            preemptions: self.engine.preemption_count(),
            steps: self.engine.step_count(),
        }));
    }

    fn pin_threads(&self) -> bool {
        match pin_current_thread(&self.spec.cores) {
            Ok(()) => true,
            Err(e) => {
                tracing::warn!(worker = self.spec.worker_id, cores = ?self.spec.cores, "running unpinned: {e}");
                false
            }
        }
    }
}
