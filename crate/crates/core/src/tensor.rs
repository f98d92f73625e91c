//! Dense row-major matrices and the exact scaled-dot-product attention
//! used as the reference for every approximate path.
//!
//! All reductions accumulate in ascending index order starting from `0.0`.
//! The hybrid kernels call the same [`dot`] so that any entry they compute
//! exactly is bit-identical to the oracle's entry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "DenseMatrix::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Rejects NaN and infinite entries.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::Contract(format!(
                "non-finite entry at ({}, {})",
                p / self.cols.max(1),
                p % self.cols.max(1)
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + Clone {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "max_abs_diff",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Lower-triangular mask: entry `(i, j)` is active iff `j <= i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub n: usize,
}

impl CausalMask {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    #[inline]
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        j <= i
    }
}

/// Inner product accumulated left to right from `0.0`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let bt = b.transpose();
    Ok(matmul_transposed(a, &bt))
}

/// `a · btᵀ` where `bt` is already stored transposed; the per-element
/// arithmetic is identical to [`matmul`].
pub(crate) fn matmul_transposed(a: &DenseMatrix, bt: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(a.cols, bt.cols);
    let mut out = DenseMatrix::zeros(a.rows, bt.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..bt.rows {
            out.data[i * bt.rows + j] = dot(ar, bt.row(j));
        }
    }
    out
}

/// Multiplier applied to raw scores before the softmax.
#[inline]
pub fn score_scale(d_head: usize) -> f32 {
    1.0 / (d_head as f32).sqrt()
}

/// Numerically stable softmax over the entries of `row` selected by
/// `active`; inactive entries are written as exactly `0.0`.
pub(crate) fn softmax_masked(row: &mut [f32], active: impl Fn(usize) -> bool) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    let mut any = false;
    for (j, &v) in row.iter().enumerate() {
        if active(j) {
            any = true;
            max = max.max(v);
        }
    }
    if !any {
        return Err(Error::Contract("softmax over a fully masked row".into()));
    }
    let mut sum = 0.0f32;
    for (j, v) in row.iter_mut().enumerate() {
        if active(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for (j, v) in row.iter_mut().enumerate() {
        if active(j) {
            *v /= sum;
        }
    }
    Ok(())
}

pub fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    softmax_masked(row, |_| true)
}

pub fn row_softmax(scores: &DenseMatrix, mask: Option<CausalMask>) -> Result<DenseMatrix> {
    if let Some(m) = mask {
        if m.n != scores.rows || m.n != scores.cols {
            return Err(Error::shape(
                "row_softmax",
                format!(
                    "causal mask of size {} on {}x{} scores",
                    m.n, scores.rows, scores.cols
                ),
            ));
        }
    }
    let mut out = scores.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        match mask {
            Some(m) => softmax_masked(row, |j| m.is_active(i, j))?,
            None => softmax_in_place(row)?,
        }
    }
    Ok(out)
}

/// `q · kᵀ / sqrt(d_head)` with the same rounding as [`dense_attention`].
pub fn scaled_scores(q: &DenseMatrix, k: &DenseMatrix) -> Result<DenseMatrix> {
    if q.cols != k.cols {
        return Err(Error::shape(
            "scaled_scores",
            format!("q has {} columns, k has {}", q.cols, k.cols),
        ));
    }
    let mut s = matmul_transposed(q, k);
    let scale = score_scale(q.cols);
    s.data.iter_mut().for_each(|v| *v *= scale);
    Ok(s)
}

/// Exact attention `softmax(q·kᵀ/sqrt(d), mask)·v`.
pub fn dense_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    causal: bool,
) -> Result<DenseMatrix> {
    if k.rows != v.rows {
        return Err(Error::shape(
            "dense_attention",
            format!("k has {} rows, v has {}", k.rows, v.rows),
        ));
    }
    if causal && q.rows != k.rows {
        return Err(Error::shape(
            "dense_attention",
            format!(
                "causal attention needs square scores, got {}x{}",
                q.rows, k.rows
            ),
        ));
    }
    let scores = scaled_scores(q, k)?;
    let probs = row_softmax(&scores, causal.then(|| CausalMask::new(q.rows)))?;
    matmul(&probs, v)
}

/// `Σ_p weights[p] · values[p]`, accumulated over ascending `p`, written
/// into `out`. Matches `matmul(weights_row, values)`.
pub(crate) fn weighted_sum<'a>(
    weights: &[f32],
    values: impl Iterator<Item = &'a [f32]> + Clone,
    out: &mut [f32],
) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = weights
            .iter()
            .zip(values.clone())
            .fold(0.0f32, |acc, (w, v)| acc + w * v[c]);
    }
}
