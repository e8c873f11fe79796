//! Allocation-only replay of a trace against both KV allocators.
//!
//! No model runs. Each request holds its prompt plus one slot per generated
//! token and stops after `actual_new_tokens` (or its full budget when the
//! trace does not say). One simulated step is one millisecond of arrivals.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{tiles_needed, AllocMode, ContiguousPool, KvAllocator, SeqId, TilePool, TilePoolConfig};
use crate::scheduler::TraceEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocRun {
    pub mode: AllocMode,
    pub requests: usize,
    /// Steps until the last request finished.
    pub steps: u64,
    /// Admissions including re-admissions after eviction.
    pub admissions: u64,
    pub preemptions: u64,
    pub peak_concurrent: usize,
    /// Mean running sequences over steps with work in flight.
    pub mean_concurrent: f64,
    pub peak_waste_slots: usize,
    pub mean_waste_slots: f64,
    /// Mean fraction of capacity holding tokens.
    pub mean_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub capacity_slots: usize,
    pub tile_size: usize,
    pub decode_reserve_tiles: usize,
    pub tiled: AllocRun,
    pub contiguous: AllocRun,
    /// `tiled.peak_concurrent / contiguous.peak_concurrent`.
    pub peak_ratio: f64,
    /// `tiled.mean_concurrent / contiguous.mean_concurrent`.
    pub mean_ratio: f64,
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "Mode | Peak concurrent | Mean concurrent | Admissions | Preemptions | Steps | Mean waste (slots) | Mean utilization\n",
        );
        for r in [&self.tiled, &self.contiguous] {
            out.push_str(&format!(
                "{} | {} | {:.2} | {} | {} | {} | {:.1} | {:.3}\n",
                match r.mode {
                    AllocMode::Tiled => "tiled",
                    AllocMode::Contiguous => "contiguous",
                },
                r.peak_concurrent,
                r.mean_concurrent,
                r.admissions,
                r.preemptions,
                r.steps,
                r.mean_waste_slots,
                r.mean_utilization,
            ));
        }
        out.push_str(&format!("peak ratio {:.2}, mean ratio {:.2}\n", self.peak_ratio, self.mean_ratio));
        out
    }
}

/// Replay `trace` against a tiled pool of `total_tiles × tile_size` slots
/// and a contiguous pool of the same capacity.
pub fn compare_alloc(
    trace: &[TraceEntry],
    total_tiles: usize,
    tile_size: usize,
    decode_reserve_tiles: usize,
) -> Result<CompareReport> {
    // Width 1: only the slot bookkeeping matters here.
    let tiled = TilePool::new(TilePoolConfig { total_tiles, tile_size, n_layers: 1, n_kv_heads: 1, head_dim: 1 })?;
    let capacity = total_tiles * tile_size;
    for (line, e) in trace.iter().enumerate() {
        let needed = tiles_needed(e.prompt.len() + e.max_new_tokens, tile_size) + decode_reserve_tiles;
        if needed > total_tiles {
            return Err(Error::InvalidRequest(format!(
                "trace entry {} needs {needed} tiles but the pool has {total_tiles}",
                line + 1
            )));
        }
    }
    let tiled = simulate(tiled, trace, decode_reserve_tiles)?;
    let contiguous = simulate(ContiguousPool::new(capacity)?, trace, decode_reserve_tiles)?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(CompareReport {
        capacity_slots: capacity,
        tile_size,
        decode_reserve_tiles,
        peak_ratio: ratio(tiled.peak_concurrent as f64, contiguous.peak_concurrent as f64),
        mean_ratio: ratio(tiled.mean_concurrent, contiguous.mean_concurrent),
        tiled,
        contiguous,
    })
}

struct SimSeq {
    id: SeqId,
    prompt_len: usize,
    max_new: usize,
    target: usize,
    generated: usize,
    admitted_at: u64,
}

impl SimSeq {
    /// Tokens that must be (re)written on admission.
    fn context_len(&self) -> usize {
        self.prompt_len + self.generated
    }
}

fn simulate<A: KvAllocator>(mut alloc: A, trace: &[TraceEntry], reserve: usize) -> Result<AllocRun> {
    let mut queue: VecDeque<SimSeq> = VecDeque::new();
    let mut running: Vec<SimSeq> = Vec::new();
    let mut next = 0;
    let mut now: u64 = 0;
    let mut run = AllocRun {
        mode: alloc.mode(),
        requests: trace.len(),
        steps: 0,
        admissions: 0,
        preemptions: 0,
        peak_concurrent: 0,
        mean_concurrent: 0.0,
        peak_waste_slots: 0,
        mean_waste_slots: 0.0,
        mean_utilization: 0.0,
    };
    let (mut busy_steps, mut sum_running, mut sum_waste, mut sum_util) = (0u64, 0.0, 0.0, 0.0);
    let capacity = alloc.snapshot().capacity_slots.max(1) as f64;
    loop {
        while next < trace.len() && trace[next].arrival_ms <= now {
            let e = &trace[next];
            let target = e.actual_new_tokens.unwrap_or(e.max_new_tokens).clamp(1, e.max_new_tokens);
            queue.push_back(SimSeq {
                id: SeqId(next as u64),
                prompt_len: e.prompt.len(),
                max_new: e.max_new_tokens,
                target,
                generated: 0,
                admitted_at: 0,
            });
            next += 1;
        }
        if queue.is_empty() && running.is_empty() {
            if next == trace.len() {
                break;
            }
            now = trace[next].arrival_ms;
            continue;
        }
        now += 1;

        // Admission: the prefill writes the context and yields one token.
        while let Some(head) = queue.front() {
            if !alloc.can_admit_request(head.context_len(), head.max_new - head.generated, reserve) {
                break;
            }
            let mut seq = queue.pop_front().expect("front checked");
            alloc.admit(seq.id, seq.context_len(), seq.max_new - seq.generated)?;
            for _ in 0..seq.context_len() {
                alloc.push_token(seq.id)?;
            }
            seq.generated += 1;
            seq.admitted_at = run.admissions;
            run.admissions += 1;
            if seq.generated >= seq.target {
                alloc.release(seq.id)?;
            } else {
                running.push(seq);
            }
        }

        // Decode: one slot per running sequence, evicting the youngest on
        // exhaustion.
        let mut i = 0;
        while i < running.len() {
            match alloc.push_token(running[i].id) {
                Ok(()) => {
                    running[i].generated += 1;
                    if running[i].generated >= running[i].target {
                        let done = running.remove(i);
                        alloc.release(done.id)?;
                    } else {
                        i += 1;
                    }
                }
                Err(Error::OutOfTiles) => {
                    let victim = (0..running.len()).max_by_key(|&j| running[j].admitted_at).expect("non-empty");
                    let seq = running.remove(victim);
                    alloc.release(seq.id)?;
                    queue.push_front(seq);
                    run.preemptions += 1;
                    if victim < i {
                        i -= 1;
                    }
                }
                Err(e) => return Err(e),
            }
        }

        let snap = alloc.snapshot();
        busy_steps += 1;
        run.peak_concurrent = run.peak_concurrent.max(running.len());
        run.peak_waste_slots = run.peak_waste_slots.max(snap.waste_slots);
        sum_running += running.len() as f64;
        sum_waste += snap.waste_slots as f64;
        sum_util += snap.live_tokens as f64 / capacity;
    }
    run.steps = now;
    if busy_steps > 0 {
        let n = busy_steps as f64;
        run.mean_concurrent = sum_running / n;
        run.mean_waste_slots = sum_waste / n;
        run.mean_utilization = sum_util / n;
    }
    Ok(run)
}
