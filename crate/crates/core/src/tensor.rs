//! Dense row-major tensors and the numeric kernels shared by the
//! training graph and the incremental inference path.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar element type. Training and inference run in `f32`; gradient
/// checks instantiate the same ops in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Multiply-accumulate counter, used to check the per-token decoding
/// complexity claims. Thread-local so concurrent decodes do not mix.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static MACS: Cell<u64> = const { Cell::new(0) };
    }

    pub fn add(n: u64) {
        MACS.with(|c| c.set(c.get().wrapping_add(n)));
    }

    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    pub fn count() -> u64 {
        MACS.with(|c| c.get())
    }
}

/// Immutable dense tensor: explicit shape vector over a flat row-major
/// buffer. Clones share the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::zero(); n]),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
        }
    }

    /// 2-D constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::shape("ragged rows".to_string()));
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape(format!(
                "matmul expects 2-D operands, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimension mismatch: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        macs::add((m * k * n) as u64);
        let a = &self.data[..];
        let b = &other.data[..];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: Arc::new(out),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn scale(&self, c: S) -> Self {
        let data = self.data.iter().map(|&a| a * c).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Adds a length-n row vector to every row of an [m, n] matrix.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let n = self.cols();
        if bias.numel() != n {
            return Err(Error::shape(format!(
                "add_row: bias length {} vs {} columns",
                bias.numel(),
                n
            )));
        }
        let mut data = self.data.as_ref().clone();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias.data.iter()) {
                *o += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn sigmoid(&self) -> Self {
        let data = self.data.iter().map(|&a| sigmoid_scalar(a)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn relu(&self) -> Self {
        let z = S::zero();
        let data = self.data.iter().map(|&a| a.max(z)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Numerically stable softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&self) -> Self {
        let n = self.cols();
        let mut data = self.data.as_ref().clone();
        for row in data.chunks_mut(n) {
            softmax_row_inplace(row);
        }
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: S) -> Result<Self> {
        let n = self.cols();
        if gain.numel() != n || bias.numel() != n {
            return Err(Error::shape(format!(
                "layer_norm: gain/bias length {}/{} vs {} columns",
                gain.numel(),
                bias.numel(),
                n
            )));
        }
        let mut data = self.data.as_ref().clone();
        for row in data.chunks_mut(n) {
            let (mean, rstd) = row_moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gain.data[j] + bias.data[j];
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = (self.rows(), self.cols());
        if start + len > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of {} columns",
                start + len,
                n
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Tensor::from_vec(vec![m, len], out)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let m = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing".to_string()))?
            .rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                if p.rows() != m {
                    return Err(Error::shape("concat_cols: row count mismatch".to_string()));
                }
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::from_vec(vec![m, total], out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let n = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing".to_string()))?
            .cols();
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            if p.cols() != n {
                return Err(Error::shape("concat_rows: column count mismatch".to_string()));
            }
            out.extend_from_slice(p.data());
            m += p.rows();
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// Running mean along rows: row t of the output is the mean of input
    /// rows 0..=t. This is the training-mode form of the cumulative
    /// average used by the averaging decoder layer.
    pub fn cummean_rows(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); m * n];
        let mut acc = vec![S::zero(); n];
        for i in 0..m {
            for (a, &v) in acc.iter_mut().zip(self.row(i)) {
                *a += v;
            }
            let inv = S::one() / S::from_f64((i + 1) as f64);
            for (o, &a) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
                *o = a * inv;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(out),
        }
    }

    pub fn sum_all(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Gather rows of `self` (a [V, d] table) at the given indices.
    pub fn gather_rows(&self, ids: &[u32]) -> Result<Self> {
        let (v, d) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if (id as usize) >= v {
                return Err(Error::Vocab {
                    token: id,
                    vocab: v,
                    context: None,
                });
            }
            out.extend_from_slice(self.row(id as usize));
        }
        Tensor::from_vec(vec![ids.len(), d], out)
    }
}

pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub(crate) fn softmax_row_inplace<S: Scalar>(row: &mut [S]) {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / n;
    (mean, S::one() / (var + eps).sqrt())
}
