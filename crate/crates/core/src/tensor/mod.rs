// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and a define-by-run gradient tape.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Gradient
//! bookkeeping (the `requires_grad` flag and the accumulated gradient)
//! lives on the [`Tape`] node that wraps a tensor, so the same weight
//! tensor can be fed into many independent tapes.

mod kernels;
mod tape;

pub use kernels::{gelu_derivative, gelu_scalar, softmax_in_place};
pub use tape::{OverrideMode, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KnError, Result};

/// Dense tensor of 32-bit floats stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Wraps `data` with the given shape; fails unless `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KnError::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Samples every entry from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("finite standard deviation");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(KnError::Dimension(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * cols..(i + 1) * cols]
    }
}

/// `c = a' · b' + beta · c` where `a'`/`b'` are optionally transposed views.
///
/// `a` is stored as `m×k` (or `k×m` when `a_trans`), `b` as `k×n` (or `n×k`
/// when `b_trans`), `c` as `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    use ndarray::{linalg::general_mat_mul, ArrayView2, ArrayViewMut2};

    let a_view = if a_trans {
        ArrayView2::from_shape((k, m), a).expect("lhs shape").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("lhs shape")
    };
    let b_view = if b_trans {
        ArrayView2::from_shape((n, k), b).expect("rhs shape").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("rhs shape")
    };
    let mut c_view = ArrayViewMut2::from_shape((m, n), c).expect("output shape");
    general_mat_mul(1.0, &a_view, &b_view, beta, &mut c_view);
}
