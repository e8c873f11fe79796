//! HTTP service, benchmark harness and allocation comparison.
//!
//! A [`Server`] owns one worker thread per planned node. Requests are
//! validated, numbered and handed to the worker with the least outstanding
//! prompt-plus-budget tokens; each worker steps its own engine and publishes
//! an immutable [`WorkerSnapshot`] after every step.

mod bench;
mod compare;
mod http;
mod server;
mod worker;

pub use bench::{format_json, format_table, run_bench, BenchOptions, BenchResult, BenchRow, TABLE_HEADERS};
pub use compare::{compare_alloc, AllocRun, CompareReport};
pub use http::{router, serve, serve_on, GenerateRequest, GenerateResponse};
pub use server::{MetricsSnapshot, PendingOutput, Server, ServerOptions, DEFAULT_QUEUE_LIMIT};
pub use worker::{WorkerHandle, WorkerSettings, WorkerSnapshot};
