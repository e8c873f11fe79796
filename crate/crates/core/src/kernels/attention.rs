use super::ops::softmax_impl;
use crate::error::{Error, Result};
use crate::kv::{BlockTable, TilePool};

const LANES: usize = 8;

/// Dot product with a fixed summation order: eight strided partial sums
/// combined pairwise. Every attention path uses this, so results do not
/// depend on which path or batch computed them.
#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x: &[f32; LANES] = x.try_into().expect("exact chunk");
        let y: &[f32; LANES] = y.try_into().expect("exact chunk");
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

#[inline(always)]
fn axpy(out: &mut [f32], w: f32, v: &[f32]) {
    for (o, &x) in out.iter_mut().zip(v) {
        *o += w * x;
    }
}

fn check_query(query: &[f32], n_heads: usize, width: usize, out: &[f32]) -> Result<usize> {
    if n_heads == 0 || !query.len().is_multiple_of(n_heads) || query.len() != width || out.len() != width {
        return Err(Error::ShapeMismatch(format!(
            "attention query {} / out {} for {n_heads} heads over width {width}",
            query.len(),
            out.len()
        )));
    }
    Ok(width / n_heads)
}

/// Multi-head attention of one query over the first `past_len` positions of
/// a paged sequence. K/V rows are read in place from the tiles named by
/// `table`; no contiguous copy is made.
#[allow(clippy::too_many_arguments)]
pub fn paged_attention(
    query: &[f32],
    n_heads: usize,
    pool: &TilePool,
    table: &BlockTable,
    layer: usize,
    past_len: usize,
    scale: f32,
    out: &mut [f32],
) -> Result<()> {
    let width = pool.config().slot_width();
    let head_dim = check_query(query, n_heads, width, out)?;
    if past_len == 0 || past_len > table.token_count() {
        return Err(Error::PositionOutOfRange { position: past_len, token_count: table.token_count() });
    }
    let tile_size = pool.tile_size();
    let n_tiles = past_len.div_ceil(tile_size);
    let blocks = table.tiles()[..n_tiles].iter().enumerate().map(|(i, &t)| {
        let rows = tile_size.min(past_len - i * tile_size);
        let (k, v) = pool.tile_kv(layer, t);
        (&k[..rows * width], &v[..rows * width])
    });
    attend(query, n_heads, head_dim, past_len, scale, blocks, out);
    Ok(())
}

/// Attention over contiguous K/V (`past_len × width`, row-major).
#[allow(clippy::too_many_arguments)]
pub fn dense_attention(
    query: &[f32],
    n_heads: usize,
    keys: &[f32],
    values: &[f32],
    width: usize,
    past_len: usize,
    scale: f32,
    out: &mut [f32],
) -> Result<()> {
    let head_dim = check_query(query, n_heads, width, out)?;
    if past_len == 0 || keys.len() < past_len * width || values.len() < past_len * width {
        return Err(Error::PositionOutOfRange { position: past_len, token_count: keys.len() / width.max(1) });
    }
    let blocks = std::iter::once((&keys[..past_len * width], &values[..past_len * width]));
    attend(query, n_heads, head_dim, past_len, scale, blocks, out);
    Ok(())
}

/// Shared arithmetic: per head, scores in position order, softmax, then
/// values accumulated in position order. `blocks` yields K/V runs of whole
/// `n_heads * head_dim` rows, `past_len` rows in total, in position order.
///
/// Like gemm, the loop nest is also compiled with AVX2 enabled and picked at
/// run time; without FMA contraction the arithmetic is the same either way.
fn attend<'a>(
    query: &[f32],
    n_heads: usize,
    head_dim: usize,
    past_len: usize,
    scale: f32,
    blocks: impl Iterator<Item = (&'a [f32], &'a [f32])> + Clone,
    out: &mut [f32],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature checked above.
            unsafe { attend_avx2(query, n_heads, head_dim, past_len, scale, blocks, out) };
            return;
        }
    }
    attend_impl(query, n_heads, head_dim, past_len, scale, blocks, out, dot, axpy)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attend_avx2<'a>(
    query: &[f32],
    n_heads: usize,
    head_dim: usize,
    past_len: usize,
    scale: f32,
    blocks: impl Iterator<Item = (&'a [f32], &'a [f32])> + Clone,
    out: &mut [f32],
) {
    if head_dim.is_multiple_of(LANES) {
        attend_avx2_rows(query, n_heads, head_dim, past_len, scale, blocks, out);
        return;
    }
    // SAFETY (both closures): this function only runs with AVX2 available.
    attend_impl(
        query,
        n_heads,
        head_dim,
        past_len,
        scale,
        blocks,
        out,
        |a, b| unsafe { dot_avx2(a, b) },
        |o, w, v| unsafe { axpy_avx2(o, w, v) },
    )
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[inline]
unsafe fn axpy_avx2(out: &mut [f32], w: f32, v: &[f32]) {
    use std::arch::x86_64::*;
    let n = out.len().min(v.len());
    let full = n / LANES * LANES;
    let wv = _mm256_set1_ps(w);
    let mut i = 0;
    while i < full {
        let o = out.as_mut_ptr().add(i);
        _mm256_storeu_ps(o, _mm256_add_ps(_mm256_loadu_ps(o), _mm256_mul_ps(wv, _mm256_loadu_ps(v.as_ptr().add(i)))));
        i += LANES;
    }
    for j in full..n {
        out[j] += w * v[j];
    }
}

/// [`dot`] with the eight lanes held in one AVX register. Separate multiply
/// and add, so each lane rounds exactly as the portable loop does.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[inline]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    let mut v = _mm256_setzero_ps();
    let mut i = 0;
    while i < full {
        let x = _mm256_loadu_ps(a.as_ptr().add(i));
        let y = _mm256_loadu_ps(b.as_ptr().add(i));
        v = _mm256_add_ps(v, _mm256_mul_ps(x, y));
        i += LANES;
    }
    let mut acc = [0.0f32; LANES];
    _mm256_storeu_ps(acc.as_mut_ptr(), v);
    for l in 0..n - full {
        acc[l] += a[full + l] * b[full + l];
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// [`attend_impl`] for heads made of whole 8-lane chunks. Scores for eight
/// positions are reduced together and the output stays in registers across
/// positions; every lane sees the same operations in the same order as
/// [`dot_avx2`] and [`axpy_avx2`].
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attend_avx2_rows<'a>(
    query: &[f32],
    n_heads: usize,
    head_dim: usize,
    past_len: usize,
    scale: f32,
    blocks: impl Iterator<Item = (&'a [f32], &'a [f32])> + Clone,
    out: &mut [f32],
) {
    use std::arch::x86_64::*;
    let width = n_heads * head_dim;
    let query = &query[..width];
    let chunks = head_dim / LANES;
    let mut scores = vec![0.0f32; n_heads * past_len];
    let mut rows = blocks.clone().flat_map(|(k, _)| k.chunks_exact(width));
    let mut group: [&[f32]; LANES] = [&[]; LANES];
    let mut p = 0;
    loop {
        let mut n = 0;
        while n < LANES {
            match rows.next() {
                Some(r) => group[n] = r,
                None => break,
            }
            n += 1;
        }
        if n < LANES {
            for (r, row) in group[..n].iter().enumerate() {
                for h in 0..n_heads {
                    let at = h * head_dim;
                    scores[h * past_len + p + r] = dot_avx2(&query[at..at + head_dim], &row[at..at + head_dim]) * scale;
                }
            }
            p += n;
            break;
        }
        for h in 0..n_heads {
            let at = h * head_dim;
            let mut v = [_mm256_setzero_ps(); LANES];
            for c in 0..chunks {
                let q = _mm256_loadu_ps(query.as_ptr().add(at + c * LANES));
                for r in 0..LANES {
                    let k = _mm256_loadu_ps(group[r].as_ptr().add(at + c * LANES));
                    v[r] = _mm256_add_ps(v[r], _mm256_mul_ps(q, k));
                }
            }
            let s = _mm256_mul_ps(reduce_lanes(v), _mm256_set1_ps(scale));
            _mm256_storeu_ps(scores.as_mut_ptr().add(h * past_len + p), s);
        }
        p += LANES;
    }
    debug_assert_eq!(p, past_len);
    for head_scores in scores.chunks_exact_mut(past_len) {
        softmax_impl(head_scores);
    }
    let out = &mut out[..width];
    let vectors = width / LANES;
    let mut j = 0;
    while j < vectors {
        let values = blocks.clone().flat_map(|(_, v)| v.chunks_exact(width));
        if vectors - j >= 8 {
            accumulate_values::<8>(out, j, head_dim, past_len, &scores, values);
            j += 8;
        } else {
            accumulate_values::<1>(out, j, head_dim, past_len, &scores, values);
            j += 1;
        }
    }
}

/// Lane `r` of the result is the fixed-order sum of the lanes of `v[r]`:
/// `((a0 + a4) + (a2 + a6)) + ((a1 + a5) + (a3 + a7))`.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[inline]
unsafe fn reduce_lanes(v: [std::arch::x86_64::__m256; LANES]) -> std::arch::x86_64::__m256 {
    use std::arch::x86_64::*;
    // [a_i + a_{i+4} of row r | same of row r + 4]
    let halves = |r: usize| {
        _mm256_add_ps(
            _mm256_permute2f128_ps::<0x20>(v[r], v[r + 4]),
            _mm256_permute2f128_ps::<0x31>(v[r], v[r + 4]),
        )
    };
    let (b0, b1, b2, b3) = (halves(0), halves(1), halves(2), halves(3));
    // [c0, c1] of two rows per 128-bit half, c0 = b0 + b2 and c1 = b1 + b3.
    let c01 = _mm256_add_ps(_mm256_shuffle_ps::<0x44>(b0, b1), _mm256_shuffle_ps::<0xEE>(b0, b1));
    let c23 = _mm256_add_ps(_mm256_shuffle_ps::<0x44>(b2, b3), _mm256_shuffle_ps::<0xEE>(b2, b3));
    _mm256_add_ps(_mm256_shuffle_ps::<0x88>(c01, c23), _mm256_shuffle_ps::<0xDD>(c01, c23))
}

/// `out[8j .. 8(j + G)] = sum_p w(h, p) * v_p`, accumulated in position
/// order from zero.
#[cfg(target_arch = "x86_64")]
#[allow(clippy::needless_range_loop)]
#[target_feature(enable = "avx2")]
#[inline]
unsafe fn accumulate_values<'a, const G: usize>(
    out: &mut [f32],
    j: usize,
    head_dim: usize,
    past_len: usize,
    scores: &[f32],
    values: impl Iterator<Item = &'a [f32]>,
) {
    use std::arch::x86_64::*;
    let heads: [usize; G] = std::array::from_fn(|g| (j + g) * LANES / head_dim);
    let mut acc = [_mm256_setzero_ps(); G];
    for (p, row) in values.enumerate() {
        for g in 0..G {
            let w = _mm256_set1_ps(scores[heads[g] * past_len + p]);
            let x = _mm256_loadu_ps(row.as_ptr().add((j + g) * LANES));
            acc[g] = _mm256_add_ps(acc[g], _mm256_mul_ps(w, x));
        }
    }
    for g in 0..G {
        _mm256_storeu_ps(out.as_mut_ptr().add((j + g) * LANES), acc[g]);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn attend_impl<'a>(
    query: &[f32],
    n_heads: usize,
    head_dim: usize,
    past_len: usize,
    scale: f32,
    blocks: impl Iterator<Item = (&'a [f32], &'a [f32])> + Clone,
    out: &mut [f32],
    dot: impl Fn(&[f32], &[f32]) -> f32,
    axpy: impl Fn(&mut [f32], f32, &[f32]),
) {
    let width = n_heads * head_dim;
    let query = &query[..width];
    // scores[h * past_len + p]
    let mut scores = vec![0.0f32; n_heads * past_len];
    let mut p = 0;
    for (k_block, _) in blocks.clone() {
        for row in k_block.chunks_exact(width) {
            for h in 0..n_heads {
                let at = h * head_dim;
                scores[h * past_len + p] = dot(&query[at..at + head_dim], &row[at..at + head_dim]) * scale;
            }
            p += 1;
        }
    }
    debug_assert_eq!(p, past_len);
    for head_scores in scores.chunks_exact_mut(past_len) {
        softmax_impl(head_scores);
    }
    let out = &mut out[..width];
    out.fill(0.0);
    let mut p = 0;
    for (_, v_block) in blocks {
        for row in v_block.chunks_exact(width) {
            for h in 0..n_heads {
                let at = h * head_dim;
                axpy(&mut out[at..at + head_dim], scores[h * past_len + p], &row[at..at + head_dim]);
            }
            p += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::{SeqId, TilePoolConfig};

    #[test]
    fn single_position_returns_value() {
        let mut pool = TilePool::new(TilePoolConfig {
            total_tiles: 2,
            tile_size: 2,
            n_layers: 1,
            n_kv_heads: 2,
            head_dim: 2,
        })
        .unwrap();
        pool.allocate_sequence(SeqId(1), 1).unwrap();
        let slot = pool.append_slot(SeqId(1)).unwrap();
        pool.write_kv(0, slot, &[0.3, -1.0, 2.0, 0.5], &[1.5, -2.5, 3.25, 4.0]);
        let table = pool.table(SeqId(1)).unwrap();
        let mut out = [0.0; 4];
        paged_attention(&[1.0, 2.0, 3.0, 4.0], 2, &pool, table, 0, 1, 0.7, &mut out).unwrap();
        assert_eq!(out, [1.5, -2.5, 3.25, 4.0]);
        assert!(matches!(
            paged_attention(&[1.0; 4], 2, &pool, table, 0, 2, 1.0, &mut out),
            Err(Error::PositionOutOfRange { .. })
        ));
        assert!(matches!(
            paged_attention(&[1.0; 3], 2, &pool, table, 0, 1, 1.0, &mut out),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
