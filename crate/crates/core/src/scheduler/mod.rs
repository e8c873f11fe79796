//! Continuous batching.
//!
//! An [`Engine`] owns one tile pool and steps all of its sequences together:
//! each [`Engine::step`] admits queued requests while tiles allow, prefills
//! the newcomers as one batch, runs one decode step over every live
//! sequence, and retires sequences that hit EOS or their token budget. When
//! a decode step finds no free tile, the most recently admitted sequence is
//! evicted and later recomputed from its accumulated tokens.

mod engine;
mod trace;

use serde::{Deserialize, Serialize};

pub use engine::{check_request, Engine, EngineConfig, PreemptionPolicy};
pub use trace::{
    default_trace, parse_trace, read_trace, run_trace, run_trace_with_cost, skewed_trace, ClockMode, SimulatedCost, TraceEntry,
    TraceRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "req#{}", self.0)
    }
}

/// What a caller submits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewRequest {
    pub prompt: Vec<u8>,
    pub max_new_tokens: usize,
    /// Milliseconds relative to the start of the run.
    pub arrival_ms: u64,
    /// Caller-side label; not required to be unique.
    pub external_id: Option<String>,
}

impl NewRequest {
    pub fn new(prompt: impl Into<Vec<u8>>, max_new_tokens: usize) -> Self {
        Self { prompt: prompt.into(), max_new_tokens, arrival_ms: 0, external_id: None }
    }

    pub fn at(mut self, arrival_ms: u64) -> Self {
        self.arrival_ms = arrival_ms;
        self
    }
}

/// A request as tracked by the engine, with its engine-assigned id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub external_id: Option<String>,
    pub prompt: Vec<u8>,
    pub max_new_tokens: usize,
    pub arrival_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Queued,
    Prefill,
    Decoding,
    Finished,
    Preempted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    MaxTokens,
}

/// One in-flight request.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub request: Request,
    /// Prompt token ids followed by generated ids.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub phase: Phase,
    pub generated_count: usize,
    pub finish_reason: Option<FinishReason>,
    /// Admission sequence number; larger means admitted more recently.
    pub admitted_at: Option<u64>,
    pub preemptions: u32,
}

impl SequenceState {
    pub fn seq_id(&self) -> crate::kv::SeqId {
        crate::kv::SeqId(self.request.id.0)
    }

    pub fn remaining_budget(&self) -> usize {
        self.request.max_new_tokens - self.generated_count
    }

    /// Outstanding work used for dispatch decisions.
    pub fn token_budget(&self) -> usize {
        self.prompt_len + self.request.max_new_tokens
    }
}

/// A finished request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutput {
    pub id: RequestId,
    pub external_id: Option<String>,
    pub prompt_tokens: usize,
    pub generated: Vec<u32>,
    pub text: String,
    pub finish_reason: FinishReason,
    pub arrival_ms: u64,
    pub preemptions: u32,
}

impl RequestOutput {
    pub fn generated_tokens(&self) -> usize {
        self.generated.len()
    }
}

/// What one [`Engine::step`] did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub admitted: usize,
    /// Tokens sampled this step, from prefill and decode.
    pub tokens_generated: usize,
    /// Prompt positions run through prefill.
    pub prefill_tokens: usize,
    /// Sequences advanced by the decode step.
    pub decode_tokens: usize,
    pub completed: Vec<RequestId>,
    pub preempted: Vec<RequestId>,
}

impl StepOutcome {
    pub fn is_idle(&self) -> bool {
        self.admitted == 0 && self.tokens_generated == 0 && self.completed.is_empty() && self.preempted.is_empty()
    }
}
