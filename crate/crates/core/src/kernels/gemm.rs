#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_shapes, Matrix};
use crate::error::{Error, Result};

/// Rows of C held in registers by the inner kernel; AVX-512 has the
/// registers for twice as many.
const MR: usize = 4;
const MR_AVX512: usize = 8;
/// Columns of C held in registers by the inner kernel.
const NR: usize = 8;

/// Below this many multiply-adds the work is not split across threads.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSizes {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl Default for BlockSizes {
    fn default() -> Self {
        Self { m: 64, n: 256, k: 256 }
    }
}

impl BlockSizes {
    pub fn new(m: usize, n: usize, k: usize) -> Result<Self> {
        if m == 0 || n == 0 || k == 0 {
            return Err(Error::InvalidConfig(format!("block sizes must be >= 1, got ({m}, {n}, {k})")));
        }
        Ok(Self { m, n, k })
    }
}

pub fn gemm_naive(a: &Matrix, b: &Matrix, bias: Option<&[f32]>) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    check_shapes(a, b, bias, &c)?;
    naive_into(a, b, bias, &mut c);
    Ok(c)
}

pub fn gemm_blocked(a: &Matrix, b: &Matrix, bias: Option<&[f32]>, sizes: BlockSizes) -> Result<Matrix> {
    let sizes = BlockSizes::new(sizes.m, sizes.n, sizes.k)?;
    let mut c = Matrix::zeros(a.rows, b.cols);
    check_shapes(a, b, bias, &c)?;
    blocked_into(a, b, bias, &mut c, sizes);
    Ok(c)
}

pub(super) fn naive_into(a: &Matrix, b: &Matrix, bias: Option<&[f32]>, c: &mut Matrix) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            c.data[i * n + j] = acc;
        }
    }
    add_bias(c, bias);
}

/// Every output element accumulates its products in ascending `k` order,
/// exactly as the naive loop does, so the result is bitwise identical to
/// [`gemm_naive`] for any block sizes and any row count.
pub(super) fn blocked_into(a: &Matrix, b: &Matrix, bias: Option<&[f32]>, c: &mut Matrix, bs: BlockSizes) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    c.data.fill(0.0);
    if m == 0 || n == 0 {
        return;
    }
    let panel_rows = bs.m.max(1);
    let work = m * n * k;
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 && m > panel_rows {
        c.data.par_chunks_mut(panel_rows * n).enumerate().for_each(|(panel, c_panel)| {
            let i0 = panel * panel_rows;
            let rows = c_panel.len() / n;
            block_panel(&a.data[i0 * k..(i0 + rows) * k], rows, &b.data, k, n, c_panel, bs);
        });
    } else {
        for (panel, c_panel) in c.data.chunks_mut(panel_rows * n).enumerate() {
            let i0 = panel * panel_rows;
            let rows = c_panel.len() / n;
            block_panel(&a.data[i0 * k..(i0 + rows) * k], rows, &b.data, k, n, c_panel, bs);
        }
    }
    add_bias(c, bias);
}

/// Multiply a horizontal panel of A (`rows × k`) into the matching panel of C.
///
/// The same scalar loop nest is compiled several times with different target
/// features and picked at run time; the arithmetic (and so the result) is
/// the same in every build, only the vector width the compiler uses differs.
fn block_panel(a: &[f32], rows: usize, b: &[f32], k: usize, n: usize, c: &mut [f32], bs: BlockSizes) {
    assert!(a.len() >= rows * k && b.len() >= k * n && c.len() >= rows * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature checked above; slice bounds asserted above.
            unsafe { panel_avx512(a, rows, b, k, n, c, bs) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { panel_avx2(a, rows, b, k, n, c, bs) };
            return;
        }
    }
    // SAFETY: slice bounds asserted above.
    unsafe { panel_impl::<NR, MR>(a.as_ptr(), rows, b.as_ptr(), k, n, c.as_mut_ptr(), bs) }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn panel_avx512(a: &[f32], rows: usize, b: &[f32], k: usize, n: usize, c: &mut [f32], bs: BlockSizes) {
    panel_impl::<32, MR_AVX512>(a.as_ptr(), rows, b.as_ptr(), k, n, c.as_mut_ptr(), bs)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn panel_avx2(a: &[f32], rows: usize, b: &[f32], k: usize, n: usize, c: &mut [f32], bs: BlockSizes) {
    panel_impl::<16, MR>(a.as_ptr(), rows, b.as_ptr(), k, n, c.as_mut_ptr(), bs)
}

/// # Safety
/// `a` must hold `rows × k`, `b` `k × n` and `c` `rows × n` values.
#[inline(always)]
unsafe fn panel_impl<const W: usize, const M: usize>(
    a: *const f32,
    rows: usize,
    b: *const f32,
    k: usize,
    n: usize,
    c: *mut f32,
    bs: BlockSizes,
) {
    for j0 in (0..n).step_by(bs.n) {
        let j1 = (j0 + bs.n).min(n);
        for p0 in (0..k).step_by(bs.k) {
            let kc = (p0 + bs.k).min(k) - p0;
            let mut i = 0;
            while i < rows {
                let r = (rows - i).min(M);
                let a_blk = a.add(i * k + p0);
                let b_blk = b.add(p0 * n);
                let c_blk = c.add(i * n);
                match r {
                    8 => tile_rows::<8, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                    7 => tile_rows::<7, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                    6 => tile_rows::<6, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                    5 => tile_rows::<5, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                    4 => tile_rows::<4, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                    3 => tile_rows::<3, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                    2 => tile_rows::<2, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                    _ => tile_rows::<1, W>(a_blk, k, b_blk, n, c_blk, j0, j1, kc),
                }
                i += r;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
unsafe fn tile_rows<const R: usize, const W: usize>(
    a: *const f32,
    lda: usize,
    b: *const f32,
    ldb: usize,
    c: *mut f32,
    j0: usize,
    j1: usize,
    kc: usize,
) {
    let mut j = j0;
    while j + W <= j1 {
        micro::<R, W>(a, lda, b.add(j), ldb, c.add(j), kc);
        j += W;
    }
    while j + NR <= j1 {
        micro::<R, NR>(a, lda, b.add(j), ldb, c.add(j), kc);
        j += NR;
    }
    // Column remainder, same accumulation order.
    for r in 0..R {
        for jj in j..j1 {
            let c_ij = c.add(r * ldb + jj);
            let mut acc = *c_ij;
            for p in 0..kc {
                acc += *a.add(r * lda + p) * *b.add(p * ldb + jj);
            }
            *c_ij = acc;
        }
    }
}

/// `R × W` block of C kept in registers over `kc` steps of the inner
/// dimension. C's leading dimension equals B's.
#[inline(always)]
unsafe fn micro<const R: usize, const W: usize>(
    a: *const f32,
    lda: usize,
    b: *const f32,
    ldb: usize,
    c: *mut f32,
    kc: usize,
) {
    let mut acc = [[0.0f32; W]; R];
    for r in 0..R {
        for j in 0..W {
            acc[r][j] = *c.add(r * ldb + j);
        }
    }
    for p in 0..kc {
        let b_row = b.add(p * ldb);
        for r in 0..R {
            let av = *a.add(r * lda + p);
            for j in 0..W {
                acc[r][j] += av * *b_row.add(j);
            }
        }
    }
    for r in 0..R {
        for j in 0..W {
            *c.add(r * ldb + j) = acc[r][j];
        }
    }
}

fn add_bias(c: &mut Matrix, bias: Option<&[f32]>) {
    if let Some(bias) = bias {
        for row in c.data.chunks_mut(c.cols) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Backend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap()
    }

    /// Triple loop accumulated in f64, independent of both backends.
    fn oracle(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a.get(i, p) as f64 * b.get(p, j) as f64).sum();
            }
        }
        out
    }

    fn max_abs(c: &Matrix, want: &[f64]) -> f64 {
        c.data().iter().zip(want).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_and_scalar() {
        let b = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        for backend in Backend::registered() {
            assert_eq!(backend.gemm(&Matrix::identity(3), &b, None).unwrap(), b);
            let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
            let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
            assert_eq!(backend.gemm(&a, &b, None).unwrap().data(), &[6.0]);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        for backend in Backend::registered() {
            assert!(matches!(backend.gemm(&a, &b, None), Err(Error::ShapeMismatch(_))));
        }
        let b = Matrix::zeros(3, 2);
        assert!(matches!(gemm_naive(&a, &b, Some(&[1.0])), Err(Error::ShapeMismatch(_))));
        assert!(BlockSizes::new(0, 1, 1).is_err());
    }

    #[test]
    fn bias_broadcasts_per_row() {
        let a = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let c = gemm_blocked(&a, &b, Some(&[10.0, 20.0]), BlockSizes::default()).unwrap();
        assert_eq!(c.data(), &[11.0, 21.0, 12.0, 22.0]);
    }

    #[test]
    fn odd_shapes_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 33, 17);
        let b = random(&mut rng, 17, 29);
        let want = oracle(&a, &b);
        assert!(max_abs(&gemm_naive(&a, &b, None).unwrap(), &want) <= 1e-4);
        let blocked = gemm_blocked(&a, &b, None, BlockSizes::new(8, 8, 8).unwrap()).unwrap();
        assert!(max_abs(&blocked, &want) <= 1e-4);
        // Degenerate blocking: blocks larger than the matrices.
        let big = gemm_blocked(&a, &b, None, BlockSizes::new(1000, 1000, 1000).unwrap()).unwrap();
        assert_eq!(big, gemm_naive(&a, &b, None).unwrap());
    }

    #[test]
    fn block_choices_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 21, 40);
        let b = random(&mut rng, 40, 19);
        let reference = gemm_naive(&a, &b, None).unwrap();
        for &bm in &[1, 4, 8, 32] {
            for &bn in &[1, 4, 8, 32] {
                for &bk in &[1, 4, 8, 32] {
                    let c = gemm_blocked(&a, &b, None, BlockSizes::new(bm, bn, bk).unwrap()).unwrap();
                    assert_eq!(c, reference, "blocks ({bm},{bn},{bk})");
                }
            }
        }
    }

    #[test]
    fn rows_are_independent_of_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 9, 64);
        let b = random(&mut rng, 64, 40);
        let full = gemm_blocked(&a, &b, None, BlockSizes::default()).unwrap();
        for i in 0..9 {
            let row = Matrix::from_vec(1, 64, a.row(i).to_vec()).unwrap();
            let single = gemm_blocked(&row, &b, None, BlockSizes::default()).unwrap();
            assert_eq!(single.data(), full.row(i));
        }
    }
}
