//! Dense row-major f32 tensors and the handful of kernels everything else
//! builds on: matmul, masked softmax, cosine similarity, row argmax.
//!
//! All kernels accumulate in a fixed order (row-major, ascending inner
//! index), so results are bit-deterministic given identical inputs.

use crate::error::{Error, Result};

/// Additive-mask sentinel standing in for negative infinity in logit space.
///
/// Oracles must use the same value to reproduce outputs bit-for-bit.
pub const MASK_NEG_INF: f32 = -1.0e9;

/// Entries at or below this are treated as hard-masked.
pub const MASK_CUTOFF: f32 = -0.5e9;

/// Added to norm products in cosine similarity so zero rows compare as 0.
pub const COSINE_EPS: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor-new",
                format!("shape {shape:?} wants {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents of a rank-2 tensor; errors otherwise.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f32) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor {
            shape: vec![r, end - start],
            data,
        }
    }

    /// Copy `src` over rows `[start, start + src.rows())`.
    pub fn set_rows(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let c = self.cols();
        if src.cols() != c || start + src.rows() > self.rows() {
            return Err(Error::shape(
                "set-rows",
                format!(
                    "cannot place {:?} at row {start} of {:?}",
                    src.shape, self.shape
                ),
            ));
        }
        let n = src.rows();
        self.data[start * c..(start + n) * c].copy_from_slice(&src.data);
        Ok(())
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::input(
                    "gather-rows",
                    format!("row index {i} out of range for {r} rows"),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), c, data)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts
            .first()
            .ok_or_else(|| Error::input("concat-rows", "no tensors given"))?
            .cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape(
                    "concat-rows",
                    format!("column mismatch: {} vs {c}", p.cols()),
                ));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, c, data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let r = parts
            .first()
            .ok_or_else(|| Error::input("concat-cols", "no tensors given"))?
            .rows();
        let total_c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for p in parts {
                if p.rows() != r {
                    return Err(Error::shape(
                        "concat-cols",
                        format!("row mismatch: {} vs {r}", p.rows()),
                    ));
                }
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(r, total_c, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bit equality, stricter than `==` (distinguishes -0.0 from 0.0).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn rms_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        (sum / self.data.len() as f64).sqrt()
    }
}

/// Standard matrix product with ascending-k accumulation per output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ka) = a.dims2("matmul")?;
    let (kb, m) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner extents disagree: {n}x{ka} vs {kb}x{m}"),
        ));
    }
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * m..(k + 1) * m];
            for j in 0..m {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    Tensor::matrix(n, m, out)
}

/// Row-wise softmax under an additive mask.
///
/// Mask entries are 0 (visible) or [`MASK_NEG_INF`] (hidden). Hidden entries
/// get probability exactly 0; a fully hidden row comes back all zeros rather
/// than NaN.
pub fn masked_softmax_rows(logits: &Tensor, additive_mask: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.dims2("masked-softmax")?;
    if additive_mask.shape() != logits.shape() {
        return Err(Error::shape(
            "masked-softmax",
            format!("mask {:?} vs logits {:?}", additive_mask.shape(), logits.shape()),
        ));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::input("masked-softmax", "NaN in logits"));
    }
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let l_row = logits.row(i);
        let m_row = additive_mask.row(i);
        let mut max = f32::NEG_INFINITY;
        for j in 0..m {
            if m_row[j] > MASK_CUTOFF {
                let w = l_row[j] + m_row[j];
                if w > max {
                    max = w;
                }
            }
        }
        if max == f32::NEG_INFINITY {
            continue; // fully masked row stays all zeros
        }
        let out_row = &mut out[i * m..(i + 1) * m];
        let mut sum = 0.0f32;
        for j in 0..m {
            if m_row[j] > MASK_CUTOFF {
                let e = (l_row[j] + m_row[j] - max).exp();
                out_row[j] = e;
                sum += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::matrix(n, m, out)
}

/// Plain row-wise softmax (no mask).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let zeros = Tensor::zeros(logits.shape().to_vec());
    masked_softmax_rows(logits, &zeros)
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
///
/// Norm products get [`COSINE_EPS`] added, so zero rows yield similarity 0
/// instead of NaN.
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, da) = a.dims2("cosine-similarity")?;
    let (m, db) = b.dims2("cosine-similarity")?;
    if da != db {
        return Err(Error::shape(
            "cosine-similarity",
            format!("feature extents disagree: {da} vs {db}"),
        ));
    }
    let norm = |t: &Tensor, i: usize| -> f32 {
        t.row(i).iter().map(|v| v * v).sum::<f32>().sqrt()
    };
    let a_norms: Vec<f32> = (0..n).map(|i| norm(a, i)).collect();
    let b_norms: Vec<f32> = (0..m).map(|j| norm(b, j)).collect();
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let a_row = a.row(i);
        for j in 0..m {
            let b_row = b.row(j);
            let mut dot = 0.0f32;
            for k in 0..da {
                dot += a_row[k] * b_row[k];
            }
            out[i * m + j] = dot / (a_norms[i] * b_norms[j] + COSINE_EPS);
        }
    }
    Tensor::matrix(n, m, out)
}

/// Per-row argmax with lowest-index tie-break, plus the max values.
pub fn argmax_rows(a: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, m) = a.dims2("argmax-rows")?;
    if m == 0 {
        return Err(Error::input("argmax-rows", "zero columns"));
    }
    let mut indices = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let row = a.row(i);
        let mut best = 0;
        let mut best_v = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        indices.push(best);
        values.push(best_v);
    }
    Ok((indices, values))
}
