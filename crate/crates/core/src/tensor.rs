//! Dense row-major `f64` tensors.
//!
//! Rank 0, 1 and 2 cover everything the stack needs; the learned modules
//! treat rank-2 tensors as matrices with samples along rows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::math;

/// Dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: shape must match the buffer and every value must
    /// be finite.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(CoreError::Contract(format!(
                "shape {shape:?} implies {expect} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "tensor of shape {shape:?} contains NaN or Inf"
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Unchecked constructor for internal use; still validates the element
    /// count in debug builds.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        debug_assert!(rows.iter().all(|row| row.len() == c));
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self::from_vec(&[r, c], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(&[rows, cols], data)
    }

    /// Standard-normal entries from the given RNG.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows when viewed as a matrix (vectors are single-column).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        debug_assert!(r < self.rows() && c < cols);
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::from_vec(&self.shape, data)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_vec(&self.shape, data)
    }

    pub fn mul(&self, other: &Tensor) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Self::from_vec(&self.shape, data)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| math::max(m, math::abs(v)))
    }

    pub fn norm2(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Matrix product; vectors are treated as single-column matrices.
    pub fn matmul(&self, other: &Tensor) -> Self {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        debug_assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        let shape: Vec<usize> = if other.shape.len() == 1 { vec![m] } else { vec![m, n] };
        Self::from_vec(&shape, out)
    }

    /// Vertical stack of matrices with equal column counts.
    pub fn vstack(parts: &[&Tensor]) -> Self {
        let cols = parts[0].cols();
        debug_assert!(parts.iter().all(|p| p.cols() == cols));
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(&[rows, cols], data)
    }

    /// Horizontal stack of matrices with equal row counts.
    pub fn hstack(parts: &[&Tensor]) -> Self {
        let rows = parts[0].rows();
        debug_assert!(parts.iter().all(|p| p.rows() == rows));
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Self::from_vec(&[rows, cols], data)
    }

    pub fn block_diag(parts: &[&Tensor]) -> Self {
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Self::zeros(&[rows, cols]);
        let (mut r0, mut c0) = (0, 0);
        for p in parts {
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    out.data[(r0 + i) * cols + (c0 + j)] = p.data[i * p.cols() + j];
                }
            }
            r0 += p.rows();
            c0 += p.cols();
        }
        out
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn slice_cols_owned(&self, start: usize, len: usize) -> Self {
        debug_assert!(start + len <= self.cols());
        let mut data = Vec::with_capacity(self.rows() * len);
        for r in 0..self.rows() {
            let row = self.row(r);
            data.extend_from_slice(&row[start..start + len]);
        }
        Self::from_vec(&[self.rows(), len], data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        debug_assert!(start + len <= self.rows());
        let data = self.data[start * c..(start + len) * c].to_vec();
        let shape: Vec<usize> = if self.shape.len() == 1 { vec![len] } else { vec![len, c] };
        Self::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn new_rejects_shape_mismatch() {
        assert!(matches!(Tensor::new(&[2, 2], vec![1.0; 3]), Err(CoreError::Contract(_))));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(Tensor::new(&[2], vec![1.0, f64::NAN]), Err(CoreError::NonFinite(_))));
        assert!(matches!(
            Tensor::new(&[1], vec![f64::INFINITY]),
            Err(CoreError::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn block_diag_places_blocks() {
        let a = Tensor::from_rows(&[vec![1.0]]);
        let b = Tensor::from_rows(&[vec![2.0, 3.0]]);
        let d = Tensor::block_diag(&[&a, &b]);
        assert_eq!(d.shape(), &[2, 3]);
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn stacks_agree_with_manual_layout() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(Tensor::vstack(&[&a, &b]).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::hstack(&[&a, &b]).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
