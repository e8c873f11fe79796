//! Numerical primitives for the transformer forward pass.
//!
//! Everything is `f32`, row-major. Matrix multiply goes through a [`Backend`]
//! so a blocked (or, later, hardware-tiled) implementation can replace the
//! reference triple loop without touching callers.

mod attention;
mod gemm;
mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{dense_attention, paged_attention};
pub use gemm::{gemm_blocked, gemm_naive, BlockSizes};
pub use ops::{exp_approx, gelu, gelu_in_place, layer_norm, layer_norm_into, softmax_in_place, softmax_rows, tanh_approx};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix-multiply implementation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    /// Reference triple loop. Always available; also the test oracle.
    Naive,
    /// Cache-blocked loops with a register-tiled inner kernel.
    Blocked(BlockSizes),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Blocked(BlockSizes::default())
    }
}

impl Backend {
    pub fn registered() -> [Backend; 2] {
        [Backend::Naive, Backend::Blocked(BlockSizes::default())]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "naive" => Ok(Backend::Naive),
            "blocked" => Ok(Backend::Blocked(BlockSizes::default())),
            other => Err(Error::UnknownBackend(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Naive => "naive",
            Backend::Blocked(_) => "blocked",
        }
    }

    /// `a · b (+ bias broadcast over rows)`.
    pub fn gemm(&self, a: &Matrix, b: &Matrix, bias: Option<&[f32]>) -> Result<Matrix> {
        let mut c = Matrix::zeros(a.rows, b.cols);
        self.gemm_into(a, b, bias, &mut c)?;
        Ok(c)
    }

    /// Like [`Backend::gemm`] but overwrites a caller-provided output.
    pub fn gemm_into(&self, a: &Matrix, b: &Matrix, bias: Option<&[f32]>, c: &mut Matrix) -> Result<()> {
        check_shapes(a, b, bias, c)?;
        match self {
            Backend::Naive => gemm::naive_into(a, b, bias, c),
            Backend::Blocked(bs) => gemm::blocked_into(a, b, bias, c, *bs),
        }
        Ok(())
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_shapes(a: &Matrix, b: &Matrix, bias: Option<&[f32]>, c: &Matrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "gemm inner dimensions: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != b.cols {
            return Err(Error::ShapeMismatch(format!("bias length {} for {} columns", bias.len(), b.cols)));
        }
    }
    if c.rows != a.rows || c.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "gemm output {}x{}, expected {}x{}",
            c.rows, c.cols, a.rows, b.cols
        )));
    }
    Ok(())
}
