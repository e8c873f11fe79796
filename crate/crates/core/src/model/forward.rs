use rayon::prelude::*;

use super::weights::{LayerWeights, Model};
use crate::error::{Error, Result};
use crate::kernels::{dense_attention, gelu_in_place, layer_norm_into, paged_attention, Backend, Matrix};
use crate::kv::{tiles_needed, SeqId, SlotRef, TilePool};

/// Next-token scores over the vocabulary.
pub type Logits = Vec<f32>;

/// A newly admitted sequence and the tokens to prefill.
#[derive(Debug, Clone, Copy)]
pub struct PrefillItem<'a> {
    pub seq: SeqId,
    pub tokens: &'a [u32],
}

/// A sequence taking one decode step: `token` is its most recently emitted
/// token, whose KV is written at position `token_count`.
#[derive(Debug, Clone, Copy)]
pub struct DecodeItem {
    pub seq: SeqId,
    pub token: u32,
}

/// One token flowing through the paged forward pass.
#[derive(Debug, Clone, Copy)]
struct Row {
    seq: SeqId,
    token: u32,
    position: usize,
    slot: SlotRef,
}

/// Argmax; on ties the lowest token id wins.
pub fn greedy_sample(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

impl Model {
    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config().vocab_size {
            return Err(Error::InvalidRequest(format!("token id {token} outside vocabulary")));
        }
        Ok(())
    }

    fn attention_scale(&self) -> f32 {
        1.0 / (self.config().head_dim as f32).sqrt()
    }

    /// Run the prompts of newly admitted sequences as one batch, writing
    /// their KV into the pool. Returns the logits at each prompt's last
    /// position.
    ///
    /// Every sequence must already be registered in `pool` with no KV
    /// written. The batch is validated up front, so on error the pool is
    /// unchanged.
    pub fn prefill(&self, backend: Backend, batch: &[PrefillItem<'_>], pool: &mut TilePool) -> Result<Vec<Logits>> {
        let cfg = self.config();
        let mut extra_tiles = 0;
        for item in batch {
            if item.tokens.is_empty() {
                return Err(Error::InvalidRequest(format!("{}: empty prompt", item.seq)));
            }
            if item.tokens.len() > cfg.max_seq_len {
                return Err(Error::PromptTooLong { len: item.tokens.len(), limit: cfg.max_seq_len });
            }
            for &t in item.tokens {
                self.check_token(t)?;
            }
            let table = pool.table(item.seq).ok_or(Error::UnknownSequence(item.seq))?;
            if table.token_count() != 0 {
                return Err(Error::InvalidRequest(format!("{} already holds KV", item.seq)));
            }
            extra_tiles += tiles_needed(item.tokens.len(), pool.tile_size()).saturating_sub(table.tiles().len());
        }
        if extra_tiles > pool.free_tiles() {
            return Err(Error::OutOfTiles);
        }
        let mut rows = Vec::with_capacity(batch.iter().map(|b| b.tokens.len()).sum());
        let mut last_rows = Vec::with_capacity(batch.len());
        for item in batch {
            for (position, &token) in item.tokens.iter().enumerate() {
                let slot = pool.append_slot(item.seq)?;
                rows.push(Row { seq: item.seq, token, position, slot });
            }
            last_rows.push(rows.len() - 1);
        }
        let hidden = self.forward_rows(backend, &rows, pool)?;
        self.logits_for_rows(backend, &hidden, &last_rows)
    }

    /// Generate logits for one more position of every sequence in `batch`.
    ///
    /// Failures are reported per sequence: a sequence that cannot get a KV
    /// slot yields `Err(OutOfTiles)` while the rest of the batch proceeds.
    pub fn decode_step(&self, backend: Backend, batch: &[DecodeItem], pool: &mut TilePool) -> Vec<Result<Logits>> {
        let cfg = self.config();
        let mut results: Vec<Option<Result<Logits>>> = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        let mut row_of_item = Vec::with_capacity(batch.len());
        for item in batch {
            let prepared = (|| {
                self.check_token(item.token)?;
                let table = pool.table(item.seq).ok_or(Error::UnknownSequence(item.seq))?;
                let position = table.token_count();
                if position == 0 {
                    return Err(Error::InvalidRequest(format!("{} has not been prefilled", item.seq)));
                }
                if position >= cfg.max_seq_len {
                    return Err(Error::PromptTooLong { len: position + 1, limit: cfg.max_seq_len });
                }
                let slot = pool.append_slot(item.seq)?;
                Ok(Row { seq: item.seq, token: item.token, position, slot })
            })();
            match prepared {
                Ok(row) => {
                    row_of_item.push(Some(rows.len()));
                    rows.push(row);
                    results.push(None);
                }
                Err(e) => {
                    row_of_item.push(None);
                    results.push(Some(Err(e)));
                }
            }
        }
        if !rows.is_empty() {
            let all: Vec<usize> = (0..rows.len()).collect();
            match self.forward_rows(backend, &rows, pool).and_then(|h| self.logits_for_rows(backend, &h, &all)) {
                Ok(mut logits) => {
                    for (slot, row) in results.iter_mut().zip(&row_of_item) {
                        if let Some(r) = row {
                            *slot = Some(Ok(std::mem::take(&mut logits[*r])));
                        }
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for (slot, row) in results.iter_mut().zip(&row_of_item) {
                        if row.is_some() {
                            *slot = Some(Err(Error::InvalidRequest(msg.clone())));
                        }
                    }
                }
            }
        }
        results.into_iter().map(|r| r.expect("every item resolved")).collect()
    }

    /// Dense causal forward over a whole sequence with contiguous KV and no
    /// pool. Returns logits for every position (`len × vocab_size`).
    pub fn reference_forward(&self, backend: Backend, tokens: &[u32]) -> Result<Matrix> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(Error::InvalidRequest("empty sequence".into()));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::PromptTooLong { len: tokens.len(), limit: cfg.max_seq_len });
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let d = cfg.d_model;
        let n = tokens.len();
        let mut x = self.embed(tokens.iter().enumerate().map(|(p, &t)| (t, p)));
        let scale = self.attention_scale();
        for layer in &self.layers {
            let h = self.norm_rows(&x, &layer.ln1_gamma, &layer.ln1_beta)?;
            let qkv = backend.gemm(&h, &layer.w_qkv, Some(&layer.b_qkv))?;
            let mut keys = Vec::with_capacity(n * d);
            let mut values = Vec::with_capacity(n * d);
            for r in 0..n {
                let row = qkv.row(r);
                keys.extend_from_slice(&row[d..2 * d]);
                values.extend_from_slice(&row[2 * d..]);
            }
            let mut att = Matrix::zeros(n, d);
            for p in 0..n {
                dense_attention(&qkv.row(p)[..d], cfg.n_heads, &keys, &values, d, p + 1, scale, att.row_mut(p))?;
            }
            self.finish_block(backend, layer, &mut x, &att)?;
        }
        let h = self.norm_rows(&x, &self.lnf_gamma, &self.lnf_beta)?;
        backend.gemm(&h, &self.output_proj, None)
    }

    fn embed(&self, tokens: impl Iterator<Item = (u32, usize)>) -> Matrix {
        let d = self.config().d_model;
        let mut data = Vec::new();
        for (token, position) in tokens {
            let te = self.token_embedding.row(token as usize);
            let pe = self.position_embedding.row(position);
            data.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        let rows = data.len() / d;
        Matrix::from_vec(rows, d, data).expect("embedding rows are d_model wide")
    }

    fn norm_rows(&self, x: &Matrix, gamma: &[f32], beta: &[f32]) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let eps = self.config().layer_norm_eps;
        for r in 0..x.rows() {
            layer_norm_into(x.row(r), gamma, beta, eps, out.row_mut(r))?;
        }
        Ok(out)
    }

    /// Output projection, residual add and the MLP half of a block.
    fn finish_block(&self, backend: Backend, layer: &LayerWeights, x: &mut Matrix, att: &Matrix) -> Result<()> {
        let proj = backend.gemm(att, &layer.w_out, Some(&layer.b_out))?;
        add_in_place(x, &proj);
        let h = self.norm_rows(x, &layer.ln2_gamma, &layer.ln2_beta)?;
        let mut up = backend.gemm(&h, &layer.w_up, Some(&layer.b_up))?;
        gelu_in_place(up.data_mut());
        let down = backend.gemm(&up, &layer.w_down, Some(&layer.b_down))?;
        add_in_place(x, &down);
        Ok(())
    }

    /// Paged forward pass over an arbitrary set of rows; returns the final
    /// residual stream (before the final norm).
    fn forward_rows(&self, backend: Backend, rows: &[Row], pool: &mut TilePool) -> Result<Matrix> {
        let cfg = self.config();
        let d = cfg.d_model;
        let mut x = self.embed(rows.iter().map(|r| (r.token, r.position)));
        let scale = self.attention_scale();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = self.norm_rows(&x, &layer.ln1_gamma, &layer.ln1_beta)?;
            let qkv = backend.gemm(&h, &layer.w_qkv, Some(&layer.b_qkv))?;
            for (r, row) in rows.iter().enumerate() {
                let q = qkv.row(r);
                pool.write_kv(l, row.slot, &q[d..2 * d], &q[2 * d..]);
            }
            let mut att = Matrix::zeros(rows.len(), d);
            let pool_ref: &TilePool = pool;
            let attend = |(r, out): (usize, &mut [f32])| -> Result<()> {
                let row = rows[r];
                let table = pool_ref.table(row.seq).ok_or(Error::UnknownSequence(row.seq))?;
                paged_attention(&qkv.row(r)[..d], cfg.n_heads, pool_ref, table, l, row.position + 1, scale, out)
            };
            if rayon::current_num_threads() > 1 && rows.len() > 1 {
                att.data_mut().par_chunks_mut(d).enumerate().try_for_each(attend)?;
            } else {
                att.data_mut().chunks_mut(d).enumerate().try_for_each(attend)?;
            }
            self.finish_block(backend, layer, &mut x, &att)?;
        }
        Ok(x)
    }

    fn logits_for_rows(&self, backend: Backend, hidden: &Matrix, rows: &[usize]) -> Result<Vec<Logits>> {
        let d = self.config().d_model;
        let mut picked = Matrix::zeros(rows.len(), d);
        for (i, &r) in rows.iter().enumerate() {
            picked.row_mut(i).copy_from_slice(hidden.row(r));
        }
        let h = self.norm_rows(&picked, &self.lnf_gamma, &self.lnf_beta)?;
        let logits = backend.gemm(&h, &self.output_proj, None)?;
        Ok((0..rows.len()).map(|i| logits.row(i).to_vec()).collect())
    }
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}
