//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations are recorded during the forward pass as an append-only node
//! list; [`Tape::backward`] replays them in reverse id order, accumulating
//! gradients per node. Node ids are topologically ordered by construction
//! (an op can only reference already-pushed inputs), so a single reverse
//! sweep visits each node exactly once.
//!
//! Every forward op validates shapes and checks its output for non-finite
//! values, surfacing both as errors instead of letting NaN/Inf flow into
//! optimizer state. Inputs are never mutated; each op writes a fresh tensor.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_src_index, reduce_to_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Exp { x: Var },
    Ln { x: Var },
    Square { x: Var },
    Gelu { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    TileRows { x: Var, times: usize },
    Mha { q: Var, k: Var, v: Var, n_heads: usize, n_blocks: usize, probs: Vec<f64> },
    Cholesky { a: Var },
    TriangularSolve { l: Var, b: Var },
    DiagPart { x: Var },
    DiagEmbed { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded operation recorder. One training step owns one tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zero tensor if `v` never fed the loss.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[v.0].value.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Tracked input: receives a gradient slot.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Untracked input: gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Re-enter a value as an untracked leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y)
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
        })?;
        let numel: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let row_vector = |s: &[f64], shape: &[usize]| -> Option<usize> {
            (shape.len() <= 1 || shape[0] == 1).then_some(s.len())
        };
        if va.shape() == out_shape.as_slice() && vb.shape() == out_shape.as_slice() {
            for (x, y) in va.data().iter().zip(vb.data()) {
                data.push(f(*x, *y));
            }
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            data.extend(va.data().iter().map(|x| f(*x, y)));
        } else if va.numel() == 1 {
            let x = va.data()[0];
            data.extend(vb.data().iter().map(|y| f(x, *y)));
        } else if va.shape() == out_shape.as_slice()
            && row_vector(vb.data(), vb.shape()) == Some(*out_shape.last().unwrap())
        {
            for row in va.data().chunks_exact(vb.numel()) {
                for (x, y) in row.iter().zip(vb.data()) {
                    data.push(f(*x, *y));
                }
            }
        } else if vb.shape() == out_shape.as_slice()
            && row_vector(va.data(), va.shape()) == Some(*out_shape.last().unwrap())
        {
            for row in vb.data().chunks_exact(va.numel()) {
                for (x, y) in va.data().iter().zip(row) {
                    data.push(f(*x, *y));
                }
            }
        } else {
            for i in 0..numel {
                let x = va.data()[broadcast_src_index(i, &out_shape, va.shape())];
                let y = vb.data()[broadcast_src_index(i, &out_shape, vb.shape())];
                data.push(f(x, y));
            }
        }
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(out_shape, data)?, op, req, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect())?;
        let req = self.requires(x);
        self.push(out, Op::Scale { x, c }, req, "scale")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e.exp()).collect())?;
        let req = self.requires(x);
        self.push(out, Op::Exp { x }, req, "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.data().iter().any(|e| *e <= 0.0) {
            return Err(Error::LogNonPositive);
        }
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e.ln()).collect())?;
        let req = self.requires(x);
        self.push(out, Op::Ln { x }, req, "ln")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * e).collect())?;
        let req = self.requires(x);
        self.push(out, Op::Square { x }, req, "square")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| gelu(*e)).collect())?;
        let req = self.requires(x);
        self.push(out, Op::Gelu { x }, req, "gelu")
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let n = v.numel() as f64;
        let s: f64 = v.data().iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s / n), Op::Mean { x }, req, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data().iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, req, "sum")
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let mut data = v.data().to_vec();
        for_each_lane(&shape, axis, |offset, stride, len| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(data[offset + i * stride]);
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (data[offset + i * stride] - max).exp();
                data[offset + i * stride] = e;
                total += e;
            }
            for i in 0..len {
                data[offset + i * stride] /= total;
            }
        });
        let req = self.requires(x);
        self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, req, "softmax")
    }

    /// Per-row standardization over the last dimension followed by an affine
    /// map: `gain * (x - mean) / sqrt(var + 1e-5) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = vx.cols();
        if d < 2 || vg.numel() != d || vb.numel() != d || vx.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            });
        }
        let rows = vx.rows();
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = vg.data()[j] * (row[j] - mu) * inv + vb.data()[j];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            Tensor::new(vx.shape().to_vec(), data)?,
            Op::LayerNorm { x, gain, bias },
            req,
            "layer_norm",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { a, b }, req, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", v.shape()),
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let out = transpose_raw(v.data(), r, c);
        let req = self.requires(x);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, req, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", v.shape(), shape),
            });
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let req = self.requires(x);
        self.push(out, Op::Reshape { x }, req, "reshape")
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 2 || start + len > v.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {}..{} of {:?}", start, start + len, v.shape()),
            });
        }
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let req = self.requires(x);
        self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x, start }, req, "slice_cols")
    }

    /// Rows `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 2 || start + len > v.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} of {:?}", start, start + len, v.shape()),
            });
        }
        let cols = v.cols();
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { x, start }, req, "slice_rows")
    }

    /// Vertical repetition of a rank-2 tensor: `[m, n]` becomes `[times*m, n]`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 2 || times == 0 {
            return Err(Error::ShapeMismatch {
                op: "tile_rows",
                detail: format!("{:?} x {}", v.shape(), times),
            });
        }
        let mut data = Vec::with_capacity(v.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let req = self.requires(x);
        self.push(
            Tensor::new(vec![times * v.rows(), v.cols()], data)?,
            Op::TileRows { x, times },
            req,
            "tile_rows",
        )
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_cols", detail: "no parts".into() });
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("expected {} rows, got {:?}", rows, v.shape()),
                });
            }
            total_cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let req = parts.iter().any(|p| self.requires(*p));
        self.push(
            Tensor::new(vec![rows, total_cols], data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            req,
            "concat_cols",
        )
    }

    /// Scaled-dot-product attention over every head and block in one node.
    ///
    /// Rows of `q` are `n_blocks` stacked query sets of equal length; `k` and
    /// `v` are stacked the same way. Attention never crosses a block
    /// boundary, so a batch of independent sequences can share one tape. Per
    /// block and head: `softmax(Q Kᵀ / sqrt(d/n_heads)) V`, with head outputs
    /// written back to their own column band.
    pub fn mha(&mut self, q: Var, k: Var, v: Var, n_heads: usize, n_blocks: usize) -> Result<Var> {
        let (vq, vk, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let bad = vq.shape().len() != 2
            || vk.shape() != vv.shape()
            || vk.shape().len() != 2
            || vq.cols() != vk.cols()
            || n_heads == 0
            || n_blocks == 0
            || vq.cols() % n_heads != 0
            || vq.rows() % n_blocks != 0
            || vk.rows() % n_blocks != 0;
        if bad {
            return Err(Error::ShapeMismatch {
                op: "mha",
                detail: format!(
                    "q {:?}, k {:?}, v {:?}, heads {}, blocks {}",
                    vq.shape(),
                    vk.shape(),
                    vv.shape(),
                    n_heads,
                    n_blocks
                ),
            });
        }
        let d = vq.cols();
        let dh = d / n_heads;
        let m = vq.rows() / n_blocks;
        let n = vk.rows() / n_blocks;
        let c = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; vq.rows() * d];
        let mut probs = vec![0.0; n_blocks * n_heads * m * n];
        for b in 0..n_blocks {
            for h in 0..n_heads {
                let p = &mut probs[(b * n_heads + h) * m * n..(b * n_heads + h + 1) * m * n];
                for i in 0..m {
                    let qrow = &vq.data()[(b * m + i) * d + h * dh..(b * m + i) * d + (h + 1) * dh];
                    let srow = &mut p[i * n..(i + 1) * n];
                    for (j, s) in srow.iter_mut().enumerate() {
                        let krow = &vk.data()[(b * n + j) * d + h * dh..(b * n + j) * d + (h + 1) * dh];
                        let mut dot = 0.0;
                        for (qe, ke) in qrow.iter().zip(krow) {
                            dot += qe * ke;
                        }
                        *s = dot * c;
                    }
                    let max = srow.iter().fold(f64::NEG_INFINITY, |a, e| a.max(*e));
                    let mut total = 0.0;
                    for s in srow.iter_mut() {
                        let e = (*s - max).exp();
                        *s = e;
                        total += e;
                    }
                    for s in srow.iter_mut() {
                        *s /= total;
                    }
                    let orow = &mut out[(b * m + i) * d + h * dh..(b * m + i) * d + (h + 1) * dh];
                    let prow = &p[i * n..(i + 1) * n];
                    for (j, pv) in prow.iter().enumerate() {
                        let vrow = &vv.data()[(b * n + j) * d + h * dh..(b * n + j) * d + (h + 1) * dh];
                        for (oe, ve) in orow.iter_mut().zip(vrow) {
                            *oe += pv * ve;
                        }
                    }
                }
            }
        }
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            Tensor::new(vec![vq.rows(), d], out)?,
            Op::Mha { q, k, v, n_heads, n_blocks, probs },
            req,
            "mha",
        )
    }

    /// Lower-triangular Cholesky factor of a symmetric positive-definite
    /// matrix. The input is symmetrized as `(A + Aᵀ)/2` before factorization;
    /// the backward pass implements the standard dense reverse-mode rule, so
    /// gradients flow through into kernel hyperparameters.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 2 || v.shape()[0] != v.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "cholesky",
                detail: format!("{:?}", v.shape()),
            });
        }
        let n = v.shape()[0];
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (v.data()[i * n + j] + v.data()[j * n + i]);
            }
        }
        let l = cholesky_raw(&sym, n)?;
        let req = self.requires(a);
        self.push(Tensor::new(vec![n, n], l)?, Op::Cholesky { a }, req, "cholesky")
    }

    /// Solve `L X = B` for lower-triangular `L` by forward substitution.
    pub fn triangular_solve(&mut self, l: Var, b: Var) -> Result<Var> {
        let (vl, vb) = (&self.nodes[l.0].value, &self.nodes[b.0].value);
        if vl.shape().len() != 2
            || vl.shape()[0] != vl.shape()[1]
            || vb.shape().len() != 2
            || vb.shape()[0] != vl.shape()[0]
        {
            return Err(Error::ShapeMismatch {
                op: "triangular_solve",
                detail: format!("L {:?}, B {:?}", vl.shape(), vb.shape()),
            });
        }
        let n = vl.shape()[0];
        for i in 0..n {
            if vl.data()[i * n + i] == 0.0 {
                return Err(Error::ZeroDiagonal { index: i });
            }
        }
        let x = solve_lower_raw(vl.data(), vb.data(), n, vb.shape()[1]);
        let req = self.requires(l) || self.requires(b);
        self.push(
            Tensor::new(vb.shape().to_vec(), x)?,
            Op::TriangularSolve { l, b },
            req,
            "triangular_solve",
        )
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag_part(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 2 || v.shape()[0] != v.shape()[1] {
            return Err(Error::ShapeMismatch { op: "diag_part", detail: format!("{:?}", v.shape()) });
        }
        let n = v.shape()[0];
        let data: Vec<f64> = (0..n).map(|i| v.data()[i * n + i]).collect();
        let req = self.requires(x);
        self.push(Tensor::new(vec![n], data)?, Op::DiagPart { x }, req, "diag_part")
    }

    /// Embed a vector as the diagonal of a square matrix.
    pub fn diag_embed(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 1 {
            return Err(Error::ShapeMismatch { op: "diag_embed", detail: format!("{:?}", v.shape()) });
        }
        let n = v.numel();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = v.data()[i];
        }
        let req = self.requires(x);
        self.push(Tensor::new(vec![n, n], data)?, Op::DiagEmbed { x }, req, "diag_embed")
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Returns one gradient slot per
    /// node; leaves that never fed the loss read back as zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NotScalarLoss { shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_value.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.apply_backward(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib_shape: &[usize], contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let target_shape = self.nodes[v.0].value.shape();
        let reduced;
        let data: &[f64] = if contrib_shape == target_shape {
            contrib
        } else {
            reduced = reduce_to_shape(contrib, contrib_shape, target_shape);
            &reduced
        };
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(data) {
                    *a += c;
                }
            }
            None => {
                grads[v.0] = Some(
                    Tensor::new(target_shape.to_vec(), data.to_vec()).expect("gradient shape"),
                );
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn apply_backward(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, out.shape(), g.data());
                self.accumulate(grads, *b, out.shape(), g.data());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, out.shape(), g.data());
                let neg: Vec<f64> = g.data().iter().map(|e| -e).collect();
                self.accumulate(grads, *b, out.shape(), &neg);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let shape = out.shape();
                let times_other = |other: &Tensor| -> Vec<f64> {
                    let mut contrib = vec![0.0; g.numel()];
                    if other.shape() == shape {
                        for (i, c) in contrib.iter_mut().enumerate() {
                            *c = g.data()[i] * other.data()[i];
                        }
                    } else if other.numel() == 1 {
                        let y = other.data()[0];
                        for (i, c) in contrib.iter_mut().enumerate() {
                            *c = g.data()[i] * y;
                        }
                    } else if (other.shape().len() <= 1 || other.shape()[0] == 1)
                        && shape.last() == Some(&other.numel())
                    {
                        let n = other.numel();
                        for (row_out, row_g) in
                            contrib.chunks_exact_mut(n).zip(g.data().chunks_exact(n))
                        {
                            for ((c, gi), y) in row_out.iter_mut().zip(row_g).zip(other.data()) {
                                *c = gi * y;
                            }
                        }
                    } else {
                        for (i, c) in contrib.iter_mut().enumerate() {
                            *c = g.data()[i]
                                * other.data()[broadcast_src_index(i, shape, other.shape())];
                        }
                    }
                    contrib
                };
                if self.requires(*a) {
                    let contrib = times_other(vb);
                    self.accumulate(grads, *a, shape, &contrib);
                }
                if self.requires(*b) {
                    let contrib = times_other(va);
                    self.accumulate(grads, *b, shape, &contrib);
                }
            }
            Op::Scale { x, c } => {
                let contrib: Vec<f64> = g.data().iter().map(|e| e * c).collect();
                self.accumulate(grads, *x, out.shape(), &contrib);
            }
            Op::Exp { x } => {
                let contrib: Vec<f64> =
                    g.data().iter().zip(out.data()).map(|(gi, yi)| gi * yi).collect();
                self.accumulate(grads, *x, out.shape(), &contrib);
            }
            Op::Ln { x } => {
                let vx = &self.nodes[x.0].value;
                let contrib: Vec<f64> =
                    g.data().iter().zip(vx.data()).map(|(gi, xi)| gi / xi).collect();
                self.accumulate(grads, *x, out.shape(), &contrib);
            }
            Op::Square { x } => {
                let vx = &self.nodes[x.0].value;
                let contrib: Vec<f64> =
                    g.data().iter().zip(vx.data()).map(|(gi, xi)| 2.0 * gi * xi).collect();
                self.accumulate(grads, *x, out.shape(), &contrib);
            }
            Op::Gelu { x } => {
                let vx = &self.nodes[x.0].value;
                let contrib: Vec<f64> =
                    g.data().iter().zip(vx.data()).map(|(gi, xi)| gi * gelu_grad(*xi)).collect();
                self.accumulate(grads, *x, out.shape(), &contrib);
            }
            Op::Mean { x } => {
                let vx = &self.nodes[x.0].value;
                let per = g.item() / vx.numel() as f64;
                let contrib = vec![per; vx.numel()];
                self.accumulate(grads, *x, vx.shape(), &contrib);
            }
            Op::Sum { x } => {
                let vx = &self.nodes[x.0].value;
                let contrib = vec![g.item(); vx.numel()];
                self.accumulate(grads, *x, vx.shape(), &contrib);
            }
            Op::Softmax { x, axis } => {
                // dx = y * (g - sum(g * y, axis))
                let mut contrib = vec![0.0; out.numel()];
                let y = out.data();
                for_each_lane(out.shape(), *axis, |offset, stride, len| {
                    let mut dot = 0.0;
                    for i in 0..len {
                        let idx = offset + i * stride;
                        dot += g.data()[idx] * y[idx];
                    }
                    for i in 0..len {
                        let idx = offset + i * stride;
                        contrib[idx] = y[idx] * (g.data()[idx] - dot);
                    }
                });
                self.accumulate(grads, *x, out.shape(), &contrib);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
                let d = vx.cols();
                let rows = vx.rows();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &vx.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut h_mean = 0.0;
                    let mut hx_mean = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let h = grow[j] * vg.data()[j];
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                        h_mean += h;
                        hx_mean += h * xhat;
                    }
                    h_mean /= d as f64;
                    hx_mean /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let h = grow[j] * vg.data()[j];
                        dx[r * d + j] = inv * (h - h_mean - xhat * hx_mean);
                    }
                }
                self.accumulate(grads, *x, vx.shape(), &dx);
                self.accumulate(grads, *gain, &[d], &dgain);
                self.accumulate(grads, *bias, &[d], &dbias);
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires(*a) {
                    // dA = g . Bᵀ
                    let da = matmul_nt_raw(g.data(), vb.data(), m, n, k);
                    self.accumulate(grads, *a, &[m, k], &da);
                }
                if self.requires(*b) {
                    // dB = Aᵀ . g
                    let db = matmul_tn_raw(va.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, &[k, n], &db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let contrib = transpose_raw(g.data(), r, c);
                self.accumulate(grads, *x, &[c, r], &contrib);
            }
            Op::Reshape { x } => {
                let vx = &self.nodes[x.0].value;
                self.accumulate(grads, *x, vx.shape(), g.data());
            }
            Op::SliceCols { x, start } => {
                let vx = &self.nodes[x.0].value;
                let (rows, cols) = (vx.rows(), vx.cols());
                let len = out.cols();
                let mut contrib = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..len {
                        contrib[r * cols + start + j] = g.data()[r * len + j];
                    }
                }
                self.accumulate(grads, *x, vx.shape(), &contrib);
            }
            Op::SliceRows { x, start } => {
                let vx = &self.nodes[x.0].value;
                let cols = vx.cols();
                let mut contrib = vec![0.0; vx.numel()];
                contrib[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, vx.shape(), &contrib);
            }
            Op::ConcatCols { parts } => {
                let rows = out.rows();
                let total = out.cols();
                let mut col0 = 0;
                for p in parts {
                    let v = &self.nodes[p.0].value;
                    let c = v.cols();
                    if self.requires(*p) {
                        let mut contrib = vec![0.0; rows * c];
                        for r in 0..rows {
                            contrib[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data()[r * total + col0..r * total + col0 + c]);
                        }
                        self.accumulate(grads, *p, v.shape(), &contrib);
                    }
                    col0 += c;
                }
            }
            Op::TileRows { x, times } => {
                let vx = &self.nodes[x.0].value;
                let per = vx.numel();
                let mut contrib = vec![0.0; per];
                for t in 0..*times {
                    for (c, ge) in contrib.iter_mut().zip(&g.data()[t * per..(t + 1) * per]) {
                        *c += ge;
                    }
                }
                self.accumulate(grads, *x, vx.shape(), &contrib);
            }
            Op::Mha { q, k, v, n_heads, n_blocks, probs } => {
                let (vq, vk, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let d = vq.cols();
                let dh = d / n_heads;
                let m = vq.rows() / n_blocks;
                let n = vk.rows() / n_blocks;
                let c = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; vq.numel()];
                let mut dk = vec![0.0; vk.numel()];
                let mut dv = vec![0.0; vv.numel()];
                let mut dp = vec![0.0; m * n];
                for b in 0..*n_blocks {
                    for h in 0..*n_heads {
                        let p = &probs[(b * n_heads + h) * m * n..(b * n_heads + h + 1) * m * n];
                        for i in 0..m {
                            let grow = &g.data()[(b * m + i) * d + h * dh..(b * m + i) * d + (h + 1) * dh];
                            let prow = &p[i * n..(i + 1) * n];
                            let dprow = &mut dp[i * n..(i + 1) * n];
                            // dV += Pᵀ g, dP = g Vᵀ
                            for j in 0..n {
                                let voff = (b * n + j) * d + h * dh;
                                let vrow = &vv.data()[voff..voff + dh];
                                let dvrow = &mut dv[voff..voff + dh];
                                let mut s = 0.0;
                                for ((dve, ge), ve) in dvrow.iter_mut().zip(grow).zip(vrow) {
                                    *dve += prow[j] * ge;
                                    s += ge * ve;
                                }
                                dprow[j] = s;
                            }
                            // softmax backward, then the 1/sqrt(dh) score scale
                            let mut dot = 0.0;
                            for (dpe, pe) in dprow.iter().zip(prow) {
                                dot += dpe * pe;
                            }
                            for (dpe, pe) in dprow.iter_mut().zip(prow) {
                                *dpe = pe * (*dpe - dot) * c;
                            }
                            // dQ += dS K, dK += dSᵀ Q
                            let qoff = (b * m + i) * d + h * dh;
                            let qrow = &vq.data()[qoff..qoff + dh];
                            let dqrow = &mut dq[qoff..qoff + dh];
                            for j in 0..n {
                                let koff = (b * n + j) * d + h * dh;
                                let krow = &vk.data()[koff..koff + dh];
                                let dkrow = &mut dk[koff..koff + dh];
                                let ds = dprow[j];
                                for ((dqe, ke), (dke, qe)) in
                                    dqrow.iter_mut().zip(krow).zip(dkrow.iter_mut().zip(qrow))
                                {
                                    *dqe += ds * ke;
                                    *dke += ds * qe;
                                }
                            }
                        }
                    }
                }
                if self.requires(*q) {
                    self.accumulate(grads, *q, vq.shape(), &dq);
                }
                if self.requires(*k) {
                    self.accumulate(grads, *k, vk.shape(), &dk);
                }
                if self.requires(*v) {
                    self.accumulate(grads, *v, vv.shape(), &dv);
                }
            }
            Op::Cholesky { a } => {
                let n = out.shape()[0];
                let contrib = cholesky_backward_raw(out.data(), g.data(), n);
                self.accumulate(grads, *a, &[n, n], &contrib);
            }
            Op::TriangularSolve { l, b } => {
                let vl = &self.nodes[l.0].value;
                let n = vl.shape()[0];
                let m = out.shape()[1];
                // dB = L⁻ᵀ g
                let db = solve_lower_trans_raw(vl.data(), g.data(), n, m);
                if self.requires(*b) {
                    self.accumulate(grads, *b, &[n, m], &db);
                }
                if self.requires(*l) {
                    // dL = -(L⁻ᵀ g) Xᵀ, restricted to the lower triangle
                    let mut dl = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..=i {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += db[i * m + c] * out.data()[j * m + c];
                            }
                            dl[i * n + j] = -s;
                        }
                    }
                    self.accumulate(grads, *l, &[n, n], &dl);
                }
            }
            Op::DiagPart { x } => {
                let vx = &self.nodes[x.0].value;
                let n = out.numel();
                let mut contrib = vec![0.0; n * n];
                for i in 0..n {
                    contrib[i * n + i] = g.data()[i];
                }
                self.accumulate(grads, *x, vx.shape(), &contrib);
            }
            Op::DiagEmbed { x } => {
                let n = out.shape()[0];
                let contrib: Vec<f64> = (0..n).map(|i| g.data()[i * n + i]).collect();
                self.accumulate(grads, *x, &[n], &contrib);
            }
        }
        Ok(())
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ce, be) in crow.iter_mut().zip(brow) {
                *ce += av * be;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] . B[k,n]ᵀ
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (ae, be) in arow.iter().zip(brow) {
                s += ae * be;
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ . G[m,n]
fn matmul_tn_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (ce, ge) in crow.iter_mut().zip(grow) {
                *ce += av * ge;
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Cholesky–Banachiewicz, erroring on the first non-positive pivot.
pub(crate) fn cholesky_raw(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Forward substitution: X = L⁻¹ B with L lower-triangular, B of width m.
pub(crate) fn solve_lower_raw(l: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for p in 0..i {
            let lv = l[i * n + p];
            if lv != 0.0 {
                for c in 0..m {
                    x[i * m + c] -= lv * x[p * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    x
}

/// Backward substitution: X = L⁻ᵀ B using the lower factor's storage.
pub(crate) fn solve_lower_trans_raw(l: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for p in (i + 1)..n {
            let lv = l[p * n + i];
            if lv != 0.0 {
                for c in 0..m {
                    x[i * m + c] -= lv * x[p * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    x
}

/// Reverse-mode rule for the Cholesky factorization: with `P` the lower
/// triangle of `Lᵀ·dL` (diagonal halved), the input adjoint is the
/// symmetrization of `L⁻ᵀ P L⁻¹`.
fn cholesky_backward_raw(l: &[f64], dl: &[f64], n: usize) -> Vec<f64> {
    // Upstream gradient restricted to the lower triangle; entries above the
    // diagonal of the output are structural zeros.
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            // (Lᵀ dL)[i,j] = sum_r L[r,i] dL[r,j], with dL lower-triangular
            for r in i.max(j)..n {
                s += l[r * n + i] * dl[r * n + j];
            }
            p[i * n + j] = if i == j { 0.5 * s } else { s };
        }
    }
    // Y = L⁻ᵀ P
    let y = solve_lower_trans_raw(l, &p, n, n);
    // Q = Y L⁻¹  via  Qᵀ = L⁻ᵀ Yᵀ
    let yt = transpose_raw(&y, n, n);
    let qt = solve_lower_trans_raw(l, &yt, n, n);
    let q = transpose_raw(&qt, n, n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (q[i * n + j] + q[j * n + i]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Iterate over every 1-D lane along `axis` of a row-major tensor, calling
/// `f(offset, stride, len)` once per lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}
