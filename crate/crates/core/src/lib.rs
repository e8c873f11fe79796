//! CPU inference engine for decoder-only transformers.
//!
//! KV storage is split into fixed-size tiles managed by [`kv::TilePool`];
//! sequences are continuously batched by [`scheduler::Engine`]; one engine
//! runs per NUMA node under [`topology`]; [`serving`] exposes the HTTP API,
//! benchmark harness and metrics.

pub mod error;
pub mod kernels;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod serving;
pub mod topology;

pub use error::{Error, Result};
