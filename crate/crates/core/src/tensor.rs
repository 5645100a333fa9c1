//! Dense, row-major, two-dimensional tensors and the matrix kernels the
//! autodiff tape is built on.
//!
//! Shapes are `rows x cols`; vectors are represented as `1 x n` (row) or
//! `n x 1` (column) tensors. All kernels are deterministic: parallel matmul
//! partitions work by output row, so every element is written exactly once
//! and the result does not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this many multiply-adds a matmul runs serially; the rayon dispatch
/// overhead dominates for tiny problems.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// Dense row-major matrix of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// All-zeros tensor of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    /// Tensor filled with one value.
    pub fn full(rows: usize, cols: usize, value: S) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    /// Build from a row-major buffer; the length must match the shape.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// `1 x n` row tensor from a slice.
    pub fn row_vector(values: &[S]) -> Self {
        Tensor { rows: 1, cols: values.len(), data: values.to_vec() }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Widen every element to `f64` (used by checkpoint serialization).
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Narrow from `f64` into this scalar type.
    pub fn from_f64(src: &Tensor<f64>) -> Self {
        Tensor {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&v| S::of_f64(v)).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        Ok(())
    }

    /// Elementwise sum into a new tensor.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    /// Elementwise difference into a new tensor.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    /// Elementwise (Hadamard) product into a new tensor.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += scale * other`, in place. Shapes must match.
    pub fn axpy(&mut self, scale: S, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        Ok(())
    }
}

/// `a (m x k) * b (k x n) -> m x n`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            detail: format!("{:?} * {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    let work = m * k * n;
    let body = |(i, out_row): (usize, &mut [S])| {
        // Accumulate row i as a sum of scaled rows of b: cache-friendly for
        // row-major layouts and auto-vectorizes well.
        let a_row = a.row(i);
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it != S::zero() {
                let b_row = b.row(t);
                for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a_it * b_tj;
                }
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(out)
}

/// `a (m x k) * b^T` where `b` is `n x k`, giving `m x n`. Both operands are
/// walked along rows, which keeps the backward pass of matmul cache-friendly.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_nt",
            detail: format!("{:?} * {:?}^T", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, n);
    let work = m * k * n;
    let body = |(i, out_row): (usize, &mut [S])| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            *o = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(out)
}

/// `a^T (k x m becomes m x k transposed) * b (k x n) -> m x n` where `a` is
/// `k x m`: computes `a.transpose() * b` without forming big temporaries in
/// the inner loop.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rows != b.rows {
        return Err(Error::Dimension {
            op: "matmul_tn",
            detail: format!("{:?}^T * {:?}", a.shape(), b.shape()),
        });
    }
    // Transposing the (comparatively small) lhs once is cheaper than striding
    // down columns in the hot loop.
    matmul(&a.transpose(), b)
}
