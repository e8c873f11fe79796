#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlm::kernels::{Backend, Matrix};
use tlm::kv::{tiles_needed, SeqId, TilePool, TilePoolConfig};
use tlm::model::{greedy_sample, DecodeItem, Model, PrefillItem};
use tlm::scheduler::TraceEntry;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn softmax_f64(x: &[f32]) -> Vec<f64> {
    let max = x.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

pub fn layer_norm_f64(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((&v, &g), &b)| (v as f64 - mean) * inv * g as f64 + b as f64).collect()
}

/// Per generated token: the sampled id and the logits it came from.
pub type Stream = Vec<(u32, Vec<f32>)>;

/// Greedy generation by rerunning the dense forward pass over the whole
/// growing sequence at every step.
pub fn reference_stream(model: &Model, prompt: &[u32], steps: usize) -> Stream {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let all = model.reference_forward(Backend::default(), &tokens).unwrap();
        let last = all.row(all.rows() - 1).to_vec();
        let next = greedy_sample(&last);
        tokens.push(next);
        out.push((next, last));
    }
    out
}

/// Greedy generation for a batch of prompts through the tile pool: one
/// batched prefill, then batched decode steps.
pub fn paged_streams(model: &Model, prompts: &[Vec<u32>], tile_size: usize, steps: usize) -> Vec<Stream> {
    let cfg = model.config();
    let need: usize = prompts.iter().map(|p| tiles_needed(p.len() + steps, tile_size)).sum();
    let mut pool = TilePool::new(TilePoolConfig {
        total_tiles: need,
        tile_size,
        n_layers: cfg.n_layers,
        n_kv_heads: cfg.n_heads,
        head_dim: cfg.head_dim,
    })
    .unwrap();
    let ids: Vec<SeqId> = (0..prompts.len() as u64).map(SeqId).collect();
    for (&id, p) in ids.iter().zip(prompts) {
        pool.allocate_sequence(id, p.len()).unwrap();
    }
    let items: Vec<PrefillItem<'_>> =
        ids.iter().zip(prompts).map(|(&seq, p)| PrefillItem { seq, tokens: p }).collect();
    let mut logits = model.prefill(Backend::default(), &items, &mut pool).unwrap();
    let mut streams: Vec<Stream> = vec![Vec::with_capacity(steps); prompts.len()];
    for step in 0..steps {
        let mut batch = Vec::with_capacity(prompts.len());
        for (i, l) in logits.into_iter().enumerate() {
            let next = greedy_sample(&l);
            streams[i].push((next, l));
            batch.push(DecodeItem { seq: ids[i], token: next });
        }
        if step + 1 == steps {
            break;
        }
        logits = model.decode_step(Backend::default(), &batch, &mut pool).into_iter().map(|r| r.unwrap()).collect();
        pool.check_invariants().unwrap();
    }
    streams
}

/// Shadow bookkeeping for one allocator trace: what each sequence should
/// hold according to the tiling rule alone.
#[derive(Default)]
pub struct Shadow {
    pub tokens: HashMap<SeqId, usize>,
}

/// Drive `ops` random allocate / append / free operations against a pool and
/// check every invariant after each one. Allocation writes the whole prompt
/// before the next check, as prefill does.
pub fn run_allocator_trace(seed: u64, ops: usize, total_tiles: usize, tile_size: usize) -> Result<(), String> {
    let mut rng = rng(seed);
    let mut pool =
        TilePool::new(TilePoolConfig { total_tiles, tile_size, n_layers: 1, n_kv_heads: 1, head_dim: 1 }).unwrap();
    let mut shadow = Shadow::default();
    let mut next_id = 0u64;
    for op in 0..ops {
        let live: Vec<SeqId> = {
            let mut v: Vec<SeqId> = shadow.tokens.keys().copied().collect();
            v.sort();
            v
        };
        match rng.random_range(0..10) {
            0..=2 => {
                let prompt = rng.random_range(1..=tile_size * 4);
                let id = SeqId(next_id);
                next_id += 1;
                let fits = pool.free_tiles() >= tiles_needed(prompt, tile_size);
                match pool.allocate_sequence(id, prompt) {
                    Ok(_) => {
                        if !fits {
                            return Err(format!("op {op}: allocation beyond free tiles succeeded"));
                        }
                        for _ in 0..prompt {
                            pool.append_slot(id).map_err(|e| format!("op {op}: prompt write failed: {e}"))?;
                        }
                        shadow.tokens.insert(id, prompt);
                    }
                    Err(tlm::Error::OutOfTiles) if !fits => {}
                    Err(e) => return Err(format!("op {op}: unexpected allocation error {e}")),
                }
            }
            3..=7 if !live.is_empty() => {
                let id = live[rng.random_range(0..live.len())];
                let t = shadow.tokens[&id];
                let crosses = t % tile_size == 0;
                let free_before = pool.free_tiles();
                match pool.append_slot(id) {
                    Ok(slot) => {
                        if slot.offset != t % tile_size {
                            return Err(format!("op {op}: slot offset {} for position {t}", slot.offset));
                        }
                        let expect_free = free_before - usize::from(crosses);
                        if pool.free_tiles() != expect_free {
                            return Err(format!("op {op}: free tiles {} expected {expect_free}", pool.free_tiles()));
                        }
                        *shadow.tokens.get_mut(&id).unwrap() += 1;
                    }
                    Err(tlm::Error::OutOfTiles) if crosses && free_before == 0 => {}
                    Err(e) => return Err(format!("op {op}: unexpected append error {e}")),
                }
            }
            _ if !live.is_empty() => {
                let id = live[rng.random_range(0..live.len())];
                let t = shadow.tokens.remove(&id).unwrap();
                let released = pool.free_sequence(id).map_err(|e| format!("op {op}: free failed: {e}"))?;
                if released != tiles_needed(t, tile_size) {
                    return Err(format!("op {op}: released {released} tiles for {t} tokens"));
                }
            }
            _ => {}
        }
        check_pool(&pool, &shadow).map_err(|e| format!("op {op}: {e}"))?;
    }
    let mut live: Vec<SeqId> = shadow.tokens.keys().copied().collect();
    live.sort();
    for id in live {
        pool.free_sequence(id).map_err(|e| e.to_string())?;
        shadow.tokens.remove(&id);
        check_pool(&pool, &shadow)?;
    }
    if pool.free_tiles() != total_tiles || pool.live_sequences() != 0 {
        return Err(format!("final state: {} of {total_tiles} tiles free", pool.free_tiles()));
    }
    if !pool.can_admit(total_tiles * tile_size, 0) {
        return Err("a full-capacity sequence is not admittable after the trace".into());
    }
    Ok(())
}

/// Conservation, disjointness, tightness and the waste bound, checked from
/// the outside against the shadow state.
pub fn check_pool(pool: &TilePool, shadow: &Shadow) -> Result<(), String> {
    pool.check_invariants()?;
    let ts = pool.tile_size();
    let total = pool.config().total_tiles;
    let mut seen = HashSet::new();
    let mut held = 0;
    for (&id, &t) in &shadow.tokens {
        let table = pool.table(id).ok_or_else(|| format!("{id:?} missing"))?;
        if table.token_count() != t {
            return Err(format!("{id:?} token count {} expected {t}", table.token_count()));
        }
        if table.tiles().len() != tiles_needed(t, ts) {
            return Err(format!("{id:?} holds {} tiles for {t} tokens", table.tiles().len()));
        }
        for &tile in table.tiles() {
            if !seen.insert(tile) {
                return Err(format!("tile {tile:?} shared"));
            }
            if pool.owner_of(tile) != Some(id) {
                return Err(format!("tile {tile:?} owner mismatch"));
            }
        }
        held += table.tiles().len();
    }
    if pool.live_sequences() != shadow.tokens.len() {
        return Err("pool tracks sequences the trace does not".into());
    }
    if pool.free_tiles() + held != total || pool.used_tiles() != held {
        return Err(format!("conservation: free {} held {held} total {total}", pool.free_tiles()));
    }
    for tile in pool.free_tile_ids() {
        if seen.contains(&tile) {
            return Err(format!("tile {tile:?} both free and held"));
        }
    }
    let stats = pool.pool_stats();
    let live_tokens: usize = shadow.tokens.values().sum();
    if stats.live_tokens != live_tokens || stats.internal_waste_slots != held * ts - live_tokens {
        return Err(format!("stats {stats:?} disagree with {live_tokens} live tokens"));
    }
    if !shadow.tokens.is_empty() && stats.internal_waste_slots >= shadow.tokens.len() * ts {
        return Err(format!("waste {} not below one tile per sequence", stats.internal_waste_slots));
    }
    Ok(())
}

/// Requests with short prompts and long budgets, all arriving at once.
pub fn decode_heavy_trace(n: usize, max_new_tokens: usize) -> Vec<TraceEntry> {
    (0..n)
        .map(|i| TraceEntry {
            arrival_ms: 0,
            prompt: format!("req {i:03}"),
            max_new_tokens,
            actual_new_tokens: None,
        })
        .collect()
}
