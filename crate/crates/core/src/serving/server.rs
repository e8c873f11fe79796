use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::worker::{WorkerHandle, WorkerSettings, WorkerSnapshot};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scheduler::{check_request, NewRequest, RequestId, RequestOutput};
use crate::topology::{aggregate, dispatch, ServerReport, WorkerPlan};

pub const DEFAULT_QUEUE_LIMIT: u64 = 10_000;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub plan: WorkerPlan,
    pub worker: WorkerSettings,
    /// Largest accepted `max_new_tokens`.
    pub max_new_tokens_cap: usize,
    /// Outstanding requests across all workers above which submissions are
    /// refused.
    pub queue_limit: u64,
}

/// Everything `/v1/metrics` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub backend: String,
    pub uptime_s: f64,
    pub workers: Vec<WorkerSnapshot>,
    pub server: ServerReport,
}

/// Front of a set of workers: validates, numbers and dispatches requests.
pub struct Server {
    model: Arc<Model>,
    workers: Vec<WorkerHandle>,
    options: ServerOptions,
    next_id: AtomicU64,
    started: Instant,
}

pub type PendingOutput = oneshot::Receiver<Result<RequestOutput>>;

impl Server {
    pub fn start(model: Arc<Model>, options: ServerOptions) -> Result<Self> {
        if options.plan.workers.is_empty() {
            return Err(Error::InfeasiblePlan("no workers planned".into()));
        }
        let workers = options
            .plan
            .workers
            .iter()
            .map(|spec| WorkerHandle::spawn(model.clone(), spec.clone(), options.worker))
            .collect::<Result<Vec<_>>>()?;
        tracing::info!(
            workers = workers.len(),
            threads = options.plan.total_threads(),
            backend = options.worker.engine.backend.name(),
            "server started"
        );
        Ok(Self { model, workers, options, next_id: AtomicU64::new(0), started: Instant::now() })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn options(&self) -> &ServerOptions {
        &self.options
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    pub fn validate(&self, request: &NewRequest) -> Result<()> {
        if request.max_new_tokens > self.options.max_new_tokens_cap {
            return Err(Error::InvalidRequest(format!(
                "max_new_tokens {} exceeds the cap of {}",
                request.max_new_tokens, self.options.max_new_tokens_cap
            )));
        }
        let w = &self.options.worker;
        check_request(
            request,
            self.model.config().max_seq_len,
            w.total_tiles,
            w.tile_size,
            w.engine.decode_reserve_tiles,
        )
    }

    pub fn outstanding_requests(&self) -> u64 {
        self.workers.iter().map(WorkerHandle::outstanding_requests).sum()
    }

    /// Validate and dispatch to the worker with the least outstanding work.
    /// Returns the assigned id, the chosen worker and the completion handle.
    pub fn submit(&self, request: NewRequest) -> Result<(RequestId, usize, PendingOutput)> {
        self.validate(&request)?;
        let outstanding = self.outstanding_requests();
        if outstanding >= self.options.queue_limit {
            return Err(Error::QueueFull(outstanding as usize));
        }
        let loads: Vec<u64> = self.workers.iter().map(WorkerHandle::outstanding_tokens).collect();
        let worker = dispatch(&loads).expect("at least one worker");
        let id = RequestId(self.next_id.fetch_add(1, Ordering::Relaxed));
        let (tx, rx) = oneshot::channel();
        self.workers[worker].submit(id, request, tx)?;
        Ok((id, worker, rx))
    }

    pub fn worker_snapshots(&self) -> Vec<WorkerSnapshot> {
        self.workers.iter().map(|w| (*w.snapshot()).clone()).collect()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let workers = self.worker_snapshots();
        let reports: Vec<_> = workers.iter().map(|w| w.report).collect();
        MetricsSnapshot {
            backend: self.options.worker.engine.backend.name().to_string(),
            uptime_s: self.started.elapsed().as_secs_f64(),
            server: aggregate(&reports),
            workers,
        }
    }

    pub fn shutdown(&mut self) {
        for w in &mut self.workers {
            w.shutdown();
        }
    }
}
