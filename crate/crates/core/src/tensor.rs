//! Dense row-major tensors and the raw kernels behind the tape operations.
//!
//! All reductions run in a fixed index order so that identical inputs give
//! bitwise-identical outputs regardless of how the surrounding work is
//! scheduled.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major array. `shape` is never empty and every extent is at least 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0), "invalid shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// 2-D tensor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent when viewed as a matrix (all but the last axis collapsed).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape never empty")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    /// Plain (untaped) matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul", other)?;
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 || other.rank() != 2 {
            return Err(TensorError::Shape { op: "matmul", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Tensor { shape: vec![c, r], data: transpose(&self.data, r, c) }
    }

    fn matrix_dims(&self, op: &'static str, other: &Self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(TensorError::Shape { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`, in i-k-j order.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // 4x8 register tile; the product order for every output element is still p = 0..k.
    const R: usize = 4;
    const W: usize = 8;
    let full_cols = n - n % W;
    let mut i = 0;
    while i + R <= m {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[T::zero(); W]; R];
            for p in 0..k {
                let bw: &[T; W] = b[p * n + j..p * n + j + W].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for t in 0..W {
                        row[t] = row[t] + av * bw[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let cw = &mut c[(i + r) * n + j..(i + r) * n + j + W];
                for (cv, &v) in cw.iter_mut().zip(row) {
                    *cv = *cv + v;
                }
            }
            j += W;
        }
        if full_cols < n {
            gemm_rows(a, b, c, i..i + R, full_cols, k, n);
        }
        i += R;
    }
    gemm_rows(a, b, c, i..m, 0, k, n);
}

fn gemm_rows<T: Scalar>(a: &[T], b: &[T], c: &mut [T], rows: std::ops::Range<usize>, col0: usize, k: usize, n: usize) {
    for i in rows {
        let crow = &mut c[i * n + col0..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = &b[p * n + col0..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

pub fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}
