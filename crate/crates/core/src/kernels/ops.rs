use super::Matrix;
use crate::error::{Error, Result};

/// Numerically stable softmax over a slice.
pub fn softmax_in_place(x: &mut [f32]) {
    softmax_impl(x)
}

/// Max and sum run over eight strided lanes combined pairwise, the same
/// fixed order as the attention dot product.
#[inline(always)]
pub(super) fn softmax_impl(x: &mut [f32]) {
    const L: usize = 8;
    if x.is_empty() {
        return;
    }
    let mut m = [f32::NEG_INFINITY; L];
    let mut chunks = x.chunks_exact(L);
    for c in &mut chunks {
        for l in 0..L {
            m[l] = if c[l] > m[l] { c[l] } else { m[l] };
        }
    }
    for (l, &v) in chunks.remainder().iter().enumerate() {
        m[l] = if v > m[l] { v } else { m[l] };
    }
    let max = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for v in x.iter_mut() {
        *v = exp_approx(*v - max);
    }
    let mut acc = [0.0f32; L];
    let mut chunks = x.chunks_exact(L);
    for c in &mut chunks {
        for l in 0..L {
            acc[l] += c[l];
        }
    }
    for (l, &v) in chunks.remainder().iter().enumerate() {
        acc[l] += v;
    }
    let sum = ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// `e^x` to within 2 ulp for `x` in `[-86, 88.37]`; below that range the
/// result is 0, above it infinity. Branch-free so loops over it vectorize.
#[inline(always)]
pub fn exp_approx(x: f32) -> f32 {
    const HI: f32 = 88.376_26;
    const LO: f32 = -86.0;
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // 1.5 * 2^23: adding it rounds to an integer held in the low mantissa bits.
    const MAGIC: f32 = 12_582_912.0;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    const P0: f32 = 1.987_569_1e-4;
    const P1: f32 = 1.398_199_9e-3;
    const P2: f32 = 8.333_452e-3;
    const P3: f32 = 4.166_579_6e-2;
    const P4: f32 = 1.666_666_5e-1;
    const P5: f32 = 0.5;
    let xc = x.clamp(LO, HI);
    let z = xc * LOG2E + MAGIC;
    let nf = z - MAGIC;
    let n = (z.to_bits() as i32).wrapping_sub(MAGIC.to_bits() as i32);
    let r = (xc - nf * C1) - nf * C2;
    let r2 = r * r;
    let mut y = P0;
    y = y * r + P1;
    y = y * r + P2;
    y = y * r + P3;
    y = y * r + P4;
    y = y * r + P5;
    let y = y * r2 + r + 1.0;
    // 2^n as 2^(n-1) * 2 keeps the exponent field in range at n = 128.
    let out = y * f32::from_bits((n.wrapping_add(126) as u32) << 23) * 2.0;
    if x < LO {
        0.0
    } else if x > HI {
        f32::INFINITY
    } else {
        out
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    if out.cols() > 0 {
        for row in out.data_mut().chunks_mut(m.cols()) {
            softmax_in_place(row);
        }
    }
    out
}

pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out)?;
    Ok(out)
}

pub fn layer_norm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) -> Result<()> {
    let n = x.len();
    if gamma.len() != n || beta.len() != n || out.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm lengths x={n} gamma={} beta={} out={}",
            gamma.len(),
            beta.len(),
            out.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("layer_norm eps must be positive, got {eps}")));
    }
    if n == 0 {
        return Ok(());
    }
    // Statistics in f64; the vectors are short and this keeps the output
    // within a few ulps of the exact normalisation.
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let inv_std = 1.0 / (var + eps as f64).sqrt();
    for i in 0..n {
        out[i] = (((x[i] as f64 - mean) * inv_std) as f32) * gamma[i] + beta[i];
    }
    Ok(())
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Rational minimax tanh, within a few ulp of the exact value over all of
/// f32. Branch-free apart from the clamp so loops over it vectorize.
#[inline(always)]
pub fn tanh_approx(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A1: f32 = 4.893_524_6e-3;
    const A3: f32 = 6.372_619_3e-4;
    const A5: f32 = 1.485_722_4e-5;
    const A7: f32 = 5.122_297e-8;
    const A9: f32 = -8.604_672e-11;
    const A11: f32 = 2.000_188e-13;
    const A13: f32 = -2.760_768_5e-16;
    const B0: f32 = 4.893_525e-3;
    const B2: f32 = 2.268_434_6e-3;
    const B4: f32 = 1.185_347_1e-4;
    const B6: f32 = 1.198_258_4e-6;
    let small = x.abs() < 4e-4;
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = A13;
    p = p * x2 + A11;
    p = p * x2 + A9;
    p = p * x2 + A7;
    p = p * x2 + A5;
    p = p * x2 + A3;
    p = p * x2 + A1;
    let p = p * x;
    let mut q = B6;
    q = q * x2 + B4;
    q = q * x2 + B2;
    q = q * x2 + B0;
    if small {
        x
    } else {
        p / q
    }
}

#[inline(always)]
fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh_approx(SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)))
}

/// GELU, tanh approximation.
pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

pub fn gelu_in_place(x: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature checked above.
            unsafe { gelu_avx512(x) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature checked above.
            unsafe { gelu_avx2(x) };
            return;
        }
    }
    gelu_loop(x)
}

/// Same scalar arithmetic in every build; only the vector width differs.
#[inline(always)]
fn gelu_loop(x: &mut [f32]) {
    for v in x {
        *v = gelu_scalar(*v);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gelu_avx512(x: &mut [f32]) {
    gelu_loop(x)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gelu_avx2(x: &mut [f32]) {
    gelu_loop(x)
}
