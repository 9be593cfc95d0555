//! Dense numeric kernels used by the engine: row softmax, rotary position
//! encoding, and masked multi-head attention that also exposes its weights.
//!
//! Everything here is plain `f32` with `f32` accumulation. All functions are
//! pure over immutable inputs and safe to call from any number of workers.

use thiserror::Error;

/// Base frequency for rotary position encoding.
pub const ROTARY_BASE: f32 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("head_dim must be even, got {0}")]
    OddHeadDim(usize),
    #[error("positions must be strictly increasing")]
    NonIncreasingPositions,
    #[error("expected {expected} positions for sequence length {seq}")]
    PositionCountMismatch { expected: usize, seq: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Row-major 2-D array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length must be rows * cols"
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Build from row slices; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
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

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Copy out a rectangular block.
    pub fn submatrix(
        &self,
        row_range: std::ops::Range<usize>,
        col_range: std::ops::Range<usize>,
    ) -> Matrix {
        assert!(row_range.end <= self.rows && col_range.end <= self.cols);
        let mut data = Vec::with_capacity(row_range.len() * col_range.len());
        for r in row_range.clone() {
            data.extend_from_slice(&self.row(r)[col_range.clone()]);
        }
        Matrix::new(row_range.len(), col_range.len(), data)
    }

    /// Element-wise mean of equally shaped matrices.
    pub fn mean_of(mats: &[Matrix]) -> Matrix {
        assert!(!mats.is_empty(), "mean of zero matrices");
        let (r, c) = (mats[0].rows, mats[0].cols);
        let mut out = Matrix::zeros(r, c);
        let inv = 1.0 / mats.len() as f32;
        for m in mats {
            assert_eq!((m.rows, m.cols), (r, c), "shape mismatch in mean");
            for (o, &v) in out.data.iter_mut().zip(&m.data) {
                *o += v;
            }
        }
        for o in &mut out.data {
            *o *= inv;
        }
        out
    }
}

/// A `[heads][seq][head_dim]` tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    heads: usize,
    seq: usize,
    head_dim: usize,
    data: Vec<f32>,
}

impl HeadTensor {
    pub fn new(heads: usize, seq: usize, head_dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            heads * seq * head_dim,
            "tensor data length mismatch"
        );
        Self {
            heads,
            seq,
            head_dim,
            data,
        }
    }

    pub fn zeros(heads: usize, seq: usize, head_dim: usize) -> Self {
        Self::new(heads, seq, head_dim, vec![0.0; heads * seq * head_dim])
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `head_dim` slice for one (head, position).
    pub fn vec(&self, head: usize, s: usize) -> &[f32] {
        let off = (head * self.seq + s) * self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    pub fn vec_mut(&mut self, head: usize, s: usize) -> &mut [f32] {
        let off = (head * self.seq + s) * self.head_dim;
        &mut self.data[off..off + self.head_dim]
    }

    /// Keep only the given sequence indices (must be in-range).
    pub fn gather_seq(&self, indices: &[usize]) -> HeadTensor {
        let mut out = HeadTensor::zeros(self.heads, indices.len(), self.head_dim);
        for h in 0..self.heads {
            for (ni, &oi) in indices.iter().enumerate() {
                out.vec_mut(h, ni).copy_from_slice(self.vec(h, oi));
            }
        }
        out
    }

    /// Concatenate along the sequence axis.
    pub fn concat_seq(&self, other: &HeadTensor) -> HeadTensor {
        assert_eq!(self.heads, other.heads);
        assert_eq!(self.head_dim, other.head_dim);
        let mut out = HeadTensor::zeros(self.heads, self.seq + other.seq, self.head_dim);
        for h in 0..self.heads {
            for s in 0..self.seq {
                out.vec_mut(h, s).copy_from_slice(self.vec(h, s));
            }
            for s in 0..other.seq {
                out.vec_mut(h, self.seq + s)
                    .copy_from_slice(other.vec(h, s));
            }
        }
        out
    }
}

/// Numerically stabilized softmax applied to every row.
///
/// Each output row sums to 1 and entries lie in [0, 1]. Rejects non-finite
/// input instead of producing NaN.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix, MathError> {
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(MathError::NonFiniteLogits);
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        if row.is_empty() {
            continue;
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let orow = out.row_mut(r);
        let mut sum = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Rotate each adjacent pair `(2j, 2j+1)` of every head vector by the angle
/// `pos * ROTARY_BASE^(-2j / head_dim)`.
///
/// `positions` supplies one absolute position per sequence entry and must be
/// strictly increasing. The rotation is an isometry: every pair keeps its
/// 2-norm.
pub fn rotary_encode(vecs: &HeadTensor, positions: &[usize]) -> Result<HeadTensor, MathError> {
    if positions.len() != vecs.seq() {
        return Err(MathError::PositionCountMismatch {
            expected: vecs.seq(),
            seq: positions.len(),
        });
    }
    if !vecs.head_dim().is_multiple_of(2) {
        return Err(MathError::OddHeadDim(vecs.head_dim()));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MathError::NonIncreasingPositions);
    }
    let half = vecs.head_dim() / 2;
    let inv_freq: Vec<f32> = (0..half)
        .map(|j| ROTARY_BASE.powf(-((2 * j) as f32) / vecs.head_dim() as f32))
        .collect();
    // Shared angle tables: one (cos, sin) per (position, pair).
    let seq = vecs.seq();
    let mut cos_t = vec![0.0f32; seq * half];
    let mut sin_t = vec![0.0f32; seq * half];
    for (s, &pos) in positions.iter().enumerate() {
        for (j, &f) in inv_freq.iter().enumerate() {
            let angle = pos as f32 * f;
            cos_t[s * half + j] = angle.cos();
            sin_t[s * half + j] = angle.sin();
        }
    }
    let mut out = vecs.clone();
    for h in 0..vecs.heads() {
        for s in 0..seq {
            let v = out.vec_mut(h, s);
            for j in 0..half {
                let (c, sn) = (cos_t[s * half + j], sin_t[s * half + j]);
                let (x, y) = (v[2 * j], v[2 * j + 1]);
                v[2 * j] = x * c - y * sn;
                v[2 * j + 1] = x * sn + y * c;
            }
        }
    }
    Ok(out)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Causal scaled-dot-product attention over per-head tensors.
///
/// Query `i` may attend key `j` iff `j <= i + causal_offset`, where
/// `causal_offset` must equal `k.seq - q.seq`. Disallowed weight cells are
/// exactly zero; allowed cells are normalized with a per-row max-subtracted
/// softmax over the allowed prefix only. Returns the outputs together with
/// one `q.seq x k.seq` weight matrix per head.
pub fn attention_forward(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    causal_offset: usize,
) -> Result<(HeadTensor, Vec<Matrix>), MathError> {
    if q.heads() != k.heads() || q.heads() != v.heads() {
        return Err(MathError::DimensionMismatch(format!(
            "head counts differ: q={} k={} v={}",
            q.heads(),
            k.heads(),
            v.heads()
        )));
    }
    if q.head_dim() != k.head_dim() {
        return Err(MathError::DimensionMismatch(format!(
            "q head_dim {} != k head_dim {}",
            q.head_dim(),
            k.head_dim()
        )));
    }
    if k.seq() != v.seq() {
        return Err(MathError::DimensionMismatch(format!(
            "k seq {} != v seq {}",
            k.seq(),
            v.seq()
        )));
    }
    if k.seq() < q.seq() {
        return Err(MathError::DimensionMismatch(format!(
            "k seq {} shorter than q seq {}",
            k.seq(),
            q.seq()
        )));
    }
    if causal_offset != k.seq() - q.seq() {
        return Err(MathError::DimensionMismatch(format!(
            "causal_offset {} != k.seq - q.seq = {}",
            causal_offset,
            k.seq() - q.seq()
        )));
    }

    let heads = q.heads();
    let scale = 1.0 / (q.head_dim() as f32).sqrt();
    let mut out = HeadTensor::zeros(heads, q.seq(), v.head_dim());
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut w = Matrix::zeros(q.seq(), k.seq());
        for i in 0..q.seq() {
            let allowed = i + causal_offset + 1;
            let qv = q.vec(h, i);
            let row = w.row_mut(i);
            let mut max = f32::NEG_INFINITY;
            for (j, cell) in row.iter_mut().enumerate().take(allowed) {
                *cell = dot(qv, k.vec(h, j)) * scale;
                max = max.max(*cell);
            }
            let mut sum = 0.0f32;
            for cell in row.iter_mut().take(allowed) {
                *cell = (*cell - max).exp();
                sum += *cell;
            }
            for cell in row.iter_mut().take(allowed) {
                *cell /= sum;
            }
            let (ov, wrow) = (out.vec_mut(h, i), w.row(i));
            for (j, &wv) in wrow.iter().enumerate().take(allowed) {
                let kv = v.vec(h, j);
                for (o, &x) in ov.iter_mut().zip(kv) {
                    *o += wv * x;
                }
            }
        }
        weights.push(w);
    }
    Ok((out, weights))
}
