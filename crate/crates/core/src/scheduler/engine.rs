use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FinishReason, NewRequest, Phase, Request, RequestId, RequestOutput, SequenceState, StepOutcome};
use crate::error::{Error, Result};
use crate::kernels::Backend;
use crate::kv::{tiles_needed, PoolStats, SeqId, TilePool, TilePoolConfig};
use crate::metrics::TokenCounters;
use crate::model::{greedy_sample, tokenizer, DecodeItem, Model, PrefillItem};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreemptionPolicy {
    /// Evict the most recently admitted sequence.
    #[default]
    EvictYoungest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_batch: usize,
    /// Free tiles that must remain beyond a prompt's own tiles for it to be
    /// admitted.
    pub decode_reserve_tiles: usize,
    pub preemption_policy: PreemptionPolicy,
    pub backend: Backend,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_batch: 64,
            decode_reserve_tiles: 1,
            preemption_policy: PreemptionPolicy::EvictYoungest,
            backend: Backend::default(),
        }
    }
}

/// Reject requests that could never complete: empty, zero budget, longer
/// than the model context, or larger than the whole pool.
pub fn check_request(
    request: &NewRequest,
    max_seq_len: usize,
    total_tiles: usize,
    tile_size: usize,
    decode_reserve_tiles: usize,
) -> Result<()> {
    if request.prompt.is_empty() {
        return Err(Error::InvalidRequest("prompt must not be empty".into()));
    }
    if request.max_new_tokens == 0 {
        return Err(Error::InvalidRequest("max_new_tokens must be at least 1".into()));
    }
    let limit = max_seq_len.saturating_sub(request.max_new_tokens);
    if request.prompt.len() > limit {
        return Err(Error::PromptTooLong { len: request.prompt.len(), limit });
    }
    let needed = tiles_needed(request.prompt.len() + request.max_new_tokens, tile_size) + decode_reserve_tiles;
    if needed > total_tiles {
        return Err(Error::ExceedsPoolCapacity { needed, total: total_tiles });
    }
    Ok(())
}

/// Continuous-batching loop for one worker. Owns the worker's tile pool.
pub struct Engine {
    model: Arc<Model>,
    config: EngineConfig,
    pool: TilePool,
    queue: VecDeque<SequenceState>,
    /// Live sequences, oldest admission first.
    running: Vec<SequenceState>,
    finished: Vec<RequestOutput>,
    next_id: u64,
    admissions: u64,
    preemptions: u64,
    steps: u64,
    counters: TokenCounters,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("queued", &self.queue.len())
            .field("running", &self.running.len())
            .field("pool", &self.pool)
            .finish()
    }
}

impl Engine {
    /// Create an engine with a pool of `total_tiles` tiles of `tile_size` slots
    /// shaped for `model`.
    pub fn new(model: Arc<Model>, config: EngineConfig, total_tiles: usize, tile_size: usize) -> Result<Self> {
        if config.max_batch == 0 {
            return Err(Error::InvalidConfig("max_batch must be at least 1".into()));
        }
        let m = model.config();
        let pool = TilePool::new(TilePoolConfig {
            total_tiles,
            tile_size,
            n_layers: m.n_layers,
            n_kv_heads: m.n_heads,
            head_dim: m.head_dim,
        })?;
        Ok(Self {
            model,
            config,
            pool,
            queue: VecDeque::new(),
            running: Vec::new(),
            finished: Vec::new(),
            next_id: 0,
            admissions: 0,
            preemptions: 0,
            steps: 0,
            counters: TokenCounters::default(),
        })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn pool(&self) -> &TilePool {
        &self.pool
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pool.pool_stats()
    }

    pub fn counters(&self) -> TokenCounters {
        self.counters
    }

    pub fn preemption_count(&self) -> u64 {
        self.preemptions
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn running(&self) -> &[SequenceState] {
        &self.running
    }

    pub fn queue(&self) -> impl Iterator<Item = &SequenceState> {
        self.queue.iter()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.running.is_empty()
    }

    /// Prompt-plus-budget tokens of everything queued or running.
    pub fn outstanding_tokens(&self) -> usize {
        self.queue.iter().chain(&self.running).map(SequenceState::token_budget).sum()
    }

    /// Check a request against model and pool limits without enqueuing it.
    pub fn validate(&self, request: &NewRequest) -> Result<()> {
        check_request(
            request,
            self.model.config().max_seq_len,
            self.pool.config().total_tiles,
            self.pool.tile_size(),
            self.config.decode_reserve_tiles,
        )
    }

    /// Enqueue a request, FIFO by arrival time then id.
    pub fn submit(&mut self, request: NewRequest) -> Result<RequestId> {
        self.submit_as(RequestId(self.next_id), request)
    }

    /// [`Engine::submit`] with a caller-chosen id, for dispatchers that number
    /// requests across several engines. The id must not be live in this engine.
    pub fn submit_as(&mut self, id: RequestId, request: NewRequest) -> Result<RequestId> {
        self.validate(&request)?;
        if self.queue.iter().chain(&self.running).any(|s| s.request.id == id) {
            return Err(Error::DuplicateSequence(SeqId(id.0)));
        }
        self.next_id = self.next_id.max(id.0 + 1);
        let tokens = tokenizer::encode(&request.prompt);
        let prompt_len = tokens.len();
        let state = SequenceState {
            request: Request {
                id,
                external_id: request.external_id,
                prompt: request.prompt,
                max_new_tokens: request.max_new_tokens,
                arrival_ms: request.arrival_ms,
            },
            tokens,
            prompt_len,
            phase: Phase::Queued,
            generated_count: 0,
            finish_reason: None,
            admitted_at: None,
            preemptions: 0,
        };
        let key = (state.request.arrival_ms, id);
        let at = self.queue.partition_point(|s| (s.request.arrival_ms, s.request.id) <= key);
        self.queue.insert(at, state);
        Ok(id)
    }

    /// Completed requests since the last call.
    pub fn drain_finished(&mut self) -> Vec<RequestOutput> {
        std::mem::take(&mut self.finished)
    }

    /// Advance every sequence by one scheduling step.
    pub fn step(&mut self) -> Result<StepOutcome> {
        self.steps += 1;
        let mut outcome = StepOutcome::default();
        self.admit_and_prefill(&mut outcome)?;
        self.decode(&mut outcome)?;
        debug_assert!(self.pool.check_invariants().is_ok(), "{:?}", self.pool.check_invariants());
        Ok(outcome)
    }

    fn admit_and_prefill(&mut self, outcome: &mut StepOutcome) -> Result<()> {
        let reserve = self.config.decode_reserve_tiles;
        let mut admitted = Vec::new();
        while self.running.len() + admitted.len() < self.config.max_batch {
            let Some(head) = self.queue.front() else { break };
            if !self.pool.can_admit(head.tokens.len(), reserve) {
                break;
            }
            let mut seq = self.queue.pop_front().expect("front checked");
            self.pool.allocate_sequence(seq.seq_id(), seq.tokens.len())?;
            seq.phase = Phase::Prefill;
            seq.admitted_at = Some(self.admissions);
            self.admissions += 1;
            admitted.push(seq);
        }
        if admitted.is_empty() {
            return Ok(());
        }
        outcome.admitted = admitted.len();
        let items: Vec<PrefillItem<'_>> =
            admitted.iter().map(|s| PrefillItem { seq: s.seq_id(), tokens: &s.tokens }).collect();
        let logits = self.model.prefill(self.config.backend, &items, &mut self.pool)?;
        drop(items);
        for (mut seq, logits) in admitted.into_iter().zip(logits) {
            outcome.prefill_tokens += seq.tokens.len();
            outcome.tokens_generated += 1;
            seq.phase = Phase::Decoding;
            if self.push_token(&mut seq, greedy_sample(&logits)) {
                self.finish(seq, outcome)?;
            } else {
                self.running.push(seq);
            }
        }
        Ok(())
    }

    fn decode(&mut self, outcome: &mut StepOutcome) -> Result<()> {
        let mut pending: Vec<RequestId> = self.running.iter().map(|s| s.request.id).collect();
        while !pending.is_empty() {
            let items: Vec<DecodeItem> = pending
                .iter()
                .map(|id| {
                    let seq = self.live(*id).expect("pending sequences are live");
                    DecodeItem { seq: seq.seq_id(), token: *seq.tokens.last().expect("prefilled") }
                })
                .collect();
            let results = self.model.decode_step(self.config.backend, &items, &mut self.pool);
            let mut failed = Vec::new();
            for (id, result) in pending.drain(..).zip(results) {
                match result {
                    Ok(logits) => {
                        outcome.decode_tokens += 1;
                        outcome.tokens_generated += 1;
                        let idx = self.running_index(id).expect("live");
                        let mut seq = self.running.remove(idx);
                        if self.push_token(&mut seq, greedy_sample(&logits)) {
                            self.finish(seq, outcome)?;
                        } else {
                            self.running.insert(idx, seq);
                        }
                    }
                    Err(Error::OutOfTiles) => failed.push(id),
                    Err(e) => return Err(e),
                }
            }
            for id in failed {
                if self.running_index(id).is_none() {
                    // Already evicted on behalf of an earlier failure.
                    continue;
                }
                let victim = self.pick_victim();
                self.preempt(victim, outcome)?;
                if victim != id {
                    pending.push(id);
                }
            }
        }
        Ok(())
    }

    fn pick_victim(&self) -> RequestId {
        match self.config.preemption_policy {
            PreemptionPolicy::EvictYoungest => {
                self.running
                    .iter()
                    .max_by_key(|s| s.admitted_at)
                    .expect("a failing sequence is live")
                    .request
                    .id
            }
        }
    }

    /// Free a running sequence's tiles and put it back at the head of the
    /// queue; its accumulated tokens are recomputed on re-admission.
    pub fn preempt(&mut self, id: RequestId, outcome: &mut StepOutcome) -> Result<()> {
        let idx = self.running_index(id).ok_or(Error::UnknownSequence(SeqId(id.0)))?;
        let mut seq = self.running.remove(idx);
        self.pool.free_sequence(seq.seq_id())?;
        seq.phase = Phase::Preempted;
        seq.admitted_at = None;
        seq.preemptions += 1;
        self.preemptions += 1;
        outcome.preempted.push(id);
        tracing::debug!(request = %id, generated = seq.generated_count, "preempted");
        self.queue.push_front(seq);
        Ok(())
    }

    /// Drop a queued or running request without producing output.
    pub fn cancel(&mut self, id: RequestId) -> Result<()> {
        if let Some(idx) = self.queue.iter().position(|s| s.request.id == id) {
            self.queue.remove(idx);
            return Ok(());
        }
        let idx = self.running_index(id).ok_or(Error::UnknownSequence(SeqId(id.0)))?;
        let seq = self.running.remove(idx);
        self.pool.free_sequence(seq.seq_id())?;
        Ok(())
    }

    fn live(&self, id: RequestId) -> Option<&SequenceState> {
        self.running.iter().find(|s| s.request.id == id)
    }

    fn running_index(&self, id: RequestId) -> Option<usize> {
        self.running.iter().position(|s| s.request.id == id)
    }

    /// Record a sampled token; returns true if the sequence is now done.
    fn push_token(&self, seq: &mut SequenceState, token: u32) -> bool {
        seq.tokens.push(token);
        seq.generated_count += 1;
        if token == self.model.config().eos_token {
            seq.finish_reason = Some(FinishReason::Eos);
        } else if seq.generated_count >= seq.request.max_new_tokens {
            seq.finish_reason = Some(FinishReason::MaxTokens);
        }
        seq.finish_reason.is_some()
    }

    fn finish(&mut self, mut seq: SequenceState, outcome: &mut StepOutcome) -> Result<()> {
        self.pool.free_sequence(seq.seq_id())?;
        seq.phase = Phase::Finished;
        let generated = seq.tokens[seq.prompt_len..].to_vec();
        self.counters.record(seq.prompt_len, generated.len());
        outcome.completed.push(seq.request.id);
        self.finished.push(RequestOutput {
            id: seq.request.id,
            external_id: seq.request.external_id,
            prompt_tokens: seq.prompt_len,
            text: tokenizer::decode_lossy(&generated),
            generated,
            finish_reason: seq.finish_reason.expect("finished sequences have a reason"),
            arrival_ms: seq.request.arrival_ms,
            preemptions: seq.preemptions,
        });
        Ok(())
    }

    /// Step until nothing is queued or running.
    pub fn run_to_completion(&mut self) -> Result<Vec<RequestOutput>> {
        while !self.is_idle() {
            self.step()?;
        }
        Ok(self.drain_finished())
    }
}
