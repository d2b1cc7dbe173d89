//! Dense row-major f64 tensors.
//!
//! Tensors are immutable after construction; every differentiable operation
//! in [`crate::tape`] produces a fresh tensor. Rank is 1 or 2 everywhere in
//! the pipeline, but elementwise ops accept any rank.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `shape` accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor { shape: vec![n, n], data }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    /// Column vector [n, 1] from a slice.
    pub fn col(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len(), 1], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Last-dimension size.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("cols() on rank-0 tensor")
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Right-aligned broadcast of two shapes. A dimension may differ only when
/// one side is 1 (or absent, which counts as 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Map a flat index in `out_shape` to the flat index of the broadcast input.
#[inline]
pub fn broadcast_src_index(flat: usize, out_shape: &[usize], src_shape: &[usize]) -> usize {
    let rank = out_shape.len();
    let offset = rank - src_shape.len();
    let mut remaining = flat;
    let mut src = 0usize;
    let mut src_stride = 1usize;
    // Walk dimensions right to left, accumulating the source index.
    for d in (0..rank).rev() {
        let coord = remaining % out_shape[d];
        remaining /= out_shape[d];
        if d >= offset {
            let sd = src_shape[d - offset];
            if sd != 1 {
                src += coord * src_stride;
            }
            src_stride *= sd;
        }
    }
    src
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape`, undoing a
/// broadcast.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    // scalar target: one total
    if target_numel == 1 {
        return vec![grad.iter().sum()];
    }
    // row-vector target ([n] or [1, n]) under a [m, n] gradient: column sums
    if grad_shape.len() == 2 && target_shape.last() == Some(&grad_shape[1]) {
        let n = grad_shape[1];
        let mut out = vec![0.0; n];
        for row in grad.chunks_exact(n) {
            for (o, g) in out.iter_mut().zip(row) {
                *o += g;
            }
        }
        return out;
    }
    let mut out = vec![0.0; target_numel];
    for (flat, g) in grad.iter().enumerate() {
        out[broadcast_src_index(flat, grad_shape, target_shape)] += g;
    }
    out
}
