//! Dense row-major matrices.
//!
//! A [`Tensor`] is a plain value: it only participates in differentiation
//! once inserted into a [`crate::tape::Tape`]. With no active record it is
//! safe to move between threads like any other owned data.

use crate::scalar::Scalar;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("value length {len} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("dimension mismatch: {op} on {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    DimMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
}

/// Dense matrix of scalars, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
    grad_enabled: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(rows: usize, cols: usize, values: Vec<S>) -> Result<Self, TensorError> {
        if values.len() != rows * cols {
            return Err(TensorError::LengthMismatch { rows, cols, len: values.len() });
        }
        Ok(Self { rows, cols, values, grad_enabled: false })
    }

    /// Shorthand for fixture-sized tensors; panics on length mismatch.
    pub fn from_values(rows: usize, cols: usize, values: &[S]) -> Self {
        Self::new(rows, cols, values.to_vec()).expect("tensor literal shape")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![S::zero(); rows * cols], grad_enabled: false }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![S::one(); rows * cols], grad_enabled: false }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self { rows, cols, values: vec![value; rows * cols], grad_enabled: false }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = S::one();
        }
        t
    }

    pub fn scalar(value: S) -> Self {
        Self { rows: 1, cols: 1, values: vec![value], grad_enabled: false }
    }

    /// Glorot-uniform initialization over `U(-a, a)` with `a = sqrt(6/(fan_in+fan_out))`.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| S::from_f64_lossy(rng.gen_range(-a..a)))
            .collect();
        Self { rows, cols, values, grad_enabled: false }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols)
            .map(|_| S::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Self { rows, cols, values, grad_enabled: false }
    }

    /// Marks the tensor as a differentiation leaf when inserted into a tape.
    pub fn with_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.shape(), (1, 1), "item() requires a 1x1 tensor");
        self.values[0]
    }

    pub fn transposed(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad_enabled: false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute entry-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<S> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| (a - b).abs())
                .fold(S::zero(), S::max),
        )
    }

    /// Values copied out as `f64`, for reports and serialization.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn from_f64_slice(rows: usize, cols: usize, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(rows, cols, values.iter().map(|&v| S::from_f64_lossy(v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_validation() {
        let err = Tensor::<f64>::new(2, 3, vec![0.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::LengthMismatch { rows: 2, cols: 3, len: 5 });
        assert!(Tensor::<f64>::new(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn indexing_and_transpose() {
        let t = Tensor::from_values(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.get(1, 2), 6.0);
        let tt = t.transposed();
        assert_eq!(tt.shape(), (3, 2));
        assert_eq!(tt.get(2, 1), 6.0);
        assert_eq!(tt.transposed(), t);
    }

    #[test]
    fn eye_diagonal() {
        let i = Tensor::<f64>::eye(3);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(i.get(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn grad_flag() {
        let t = Tensor::<f64>::zeros(1, 1);
        assert!(!t.grad_enabled());
        assert!(t.with_grad().grad_enabled());
    }
}
