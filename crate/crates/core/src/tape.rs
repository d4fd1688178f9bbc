//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Define-by-run: every operation evaluates eagerly and records a node with
//! parent handles. `backward` walks the node list in reverse, so the
//! topological order is the insertion order and each node is visited exactly
//! once. Tapes are single-owner (`&mut self` everywhere); distinct tapes can
//! run on distinct threads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::linalg;
use crate::math;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// a*x + b with scalar constants; the offset has zero derivative.
    Affine { x: usize, a: f64 },
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    /// Matrix plus a row vector broadcast over all rows.
    AddRow { m: usize, r: usize },
    /// Tensor times a one-element scalar variable.
    MulScalar { x: usize, s: usize },
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    /// sqrt with zero gradient for arguments below the guard threshold.
    Sqrt(usize),
    Relu(usize),
    Recip(usize),
    Sin(usize),
    Cos(usize),
    Atan2 { y: usize, x: usize },
    /// Elementwise clamp; `lo`/`hi` are tensors of the same shape.
    Clip { x: usize, lo: usize, hi: usize },
    /// Linear solve `A x = b`; differentiable in both `A` and `b`.
    Solve { a: usize, b: usize },
    /// Forward value of the quantized input; gradient routed to `ze`.
    StPassthrough { ze: usize },
    StopGrad,
    GatherRows { src: usize, idx: Vec<usize> },
    /// Shift rows by `offset` within consecutive blocks of `block` rows,
    /// filling vacated rows with zeros.
    ShiftRows { src: usize, block: usize, offset: isize },
    /// Repeat each row `times` times (interleaved).
    RepeatRows { src: usize, times: usize },
    SliceRows { src: usize, start: usize },
    SliceCols { src: usize, start: usize },
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    Reshape { src: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zero tensor for variables
    /// that did not participate.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn contribution(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Radius² below which atan2/sqrt gradients are zeroed to avoid blow-up.
const RADIUS_GUARD_SQ: f64 = 1e-18;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn shape_eq(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.shape_eq(a, b, "add");
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.shape_eq(a, b, "sub");
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.shape_eq(a, b, "mul");
        let v = self.value(a).mul(self.value(b));
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// a*x + b with f64 constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        self.push(v, Op::Affine { x: x.0, a })
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).cols(),
            self.value(b).rows(),
            "matmul: inner dimensions {} vs {}",
            self.value(a).cols(),
            self.value(b).rows()
        );
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// Sum of squared entries as a scalar.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    /// Matrix plus row-vector broadcast.
    pub fn add_row(&mut self, m: Var, r: Var) -> Var {
        let (rows, cols) = (self.value(m).rows(), self.value(m).cols());
        assert_eq!(self.value(r).len(), cols, "add_row: row length mismatch");
        let mut out = self.value(m).clone();
        let rv = self.value(r).data().to_vec();
        for i in 0..rows {
            for j in 0..cols {
                let v = out.at(i, j) + rv[j];
                out.set(i, j, v);
            }
        }
        self.push(out, Op::AddRow { m: m.0, r: r.0 })
    }

    /// Tensor scaled by a one-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert!(self.value(s).is_scalar(), "mul_scalar: scalar operand required");
        let sv = self.value(s).item();
        let v = self.value(x).scale(sv);
        self.push(v, Op::MulScalar { x: x.0, s: s.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::tanh);
        self.push(v, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::sigmoid);
        self.push(v, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::exp);
        self.push(v, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::ln);
        self.push(v, Op::Ln(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::sqrt);
        self.push(v, Op::Sqrt(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| math::max(t, 0.0));
        self.push(v, Op::Relu(x.0))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| 1.0 / t);
        self.push(v, Op::Recip(x.0))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::sin);
        self.push(v, Op::Sin(x.0))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::cos);
        self.push(v, Op::Cos(x.0))
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.shape_eq(y, x, "atan2");
        let vy = self.value(y).data().to_vec();
        let vx = self.value(x).data().to_vec();
        let data: Vec<f64> = vy.iter().zip(&vx).map(|(&a, &b)| math::atan2(a, b)).collect();
        let v = Tensor::from_vec(self.value(y).shape(), data);
        self.push(v, Op::Atan2 { y: y.0, x: x.0 })
    }

    /// Elementwise clamp with tensor bounds. Subgradient is zero exactly at
    /// the kinks; when a bound is active the gradient flows to that bound.
    pub fn clip(&mut self, x: Var, lo: Var, hi: Var) -> Var {
        self.shape_eq(x, lo, "clip(lo)");
        self.shape_eq(x, hi, "clip(hi)");
        let xv = self.value(x).data().to_vec();
        let lov = self.value(lo).data().to_vec();
        let hiv = self.value(hi).data().to_vec();
        let data: Vec<f64> =
            (0..xv.len()).map(|i| math::clamp(xv[i], lov[i], hiv[i])).collect();
        let v = Tensor::from_vec(self.value(x).shape(), data);
        self.push(v, Op::Clip { x: x.0, lo: lo.0, hi: hi.0 })
    }

    /// Differentiable linear solve; `b` may be a vector or a matrix of
    /// right-hand-side columns.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let am = self.value(a);
        let bm = self.value(b);
        if am.rows() != am.cols() || am.rows() != bm.rows() {
            return Err(CoreError::Contract(format!(
                "solve: incompatible shapes {:?} and {:?}",
                am.shape(),
                bm.shape()
            )));
        }
        let x = linalg::solve(am, bm)?;
        Ok(self.push(x, Op::Solve { a: a.0, b: b.0 }))
    }

    /// Straight-through estimator: forward value of `zq`, backward gradient
    /// routed unchanged to `ze`.
    pub fn st_passthrough(&mut self, zq: Var, ze: Var) -> Result<Var> {
        if self.value(zq).shape() != self.value(ze).shape() {
            return Err(CoreError::Contract(format!(
                "st_passthrough: shape mismatch {:?} vs {:?}",
                self.value(zq).shape(),
                self.value(ze).shape()
            )));
        }
        let v = self.value(zq).clone();
        Ok(self.push(v, Op::StPassthrough { ze: ze.0 }))
    }

    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad)
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let s = self.value(src);
        let cols = s.cols();
        assert!(idx.iter().all(|&i| i < s.rows()), "gather_rows: index out of range");
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(s.row(i));
        }
        let v = Tensor::from_vec(&[idx.len(), cols], data);
        self.push(v, Op::GatherRows { src: src.0, idx: idx.to_vec() })
    }

    /// Shift rows down by `offset` (up if negative) within consecutive blocks
    /// of `block` rows; vacated rows become zero.
    pub fn shift_rows(&mut self, src: Var, block: usize, offset: isize) -> Var {
        let s = self.value(src);
        let (rows, cols) = (s.rows(), s.cols());
        assert!(block > 0 && rows % block == 0, "shift_rows: rows not divisible by block");
        let mut out = Tensor::zeros(&[rows, cols]);
        for b in 0..rows / block {
            for i in 0..block {
                let j = i as isize - offset;
                if j >= 0 && (j as usize) < block {
                    let srow = s.row(b * block + j as usize).to_vec();
                    for (c, v) in srow.iter().enumerate() {
                        out.set(b * block + i, c, *v);
                    }
                }
            }
        }
        self.push(out, Op::ShiftRows { src: src.0, block, offset })
    }

    /// Repeat each row `times` times, interleaved.
    pub fn repeat_rows(&mut self, src: Var, times: usize) -> Var {
        let s = self.value(src);
        let (rows, cols) = (s.rows(), s.cols());
        let mut data = Vec::with_capacity(rows * times * cols);
        for i in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(s.row(i));
            }
        }
        let v = Tensor::from_vec(&[rows * times, cols], data);
        self.push(v, Op::RepeatRows { src: src.0, times })
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.value(src).slice_rows(start, len);
        self.push(v, Op::SliceRows { src: src.0, start })
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(s.rows() * len);
        for r in 0..s.rows() {
            let row = s.row(r);
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::from_vec(&[s.rows(), len], data);
        self.push(v, Op::SliceCols { src: src.0, start })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).cols(), self.value(b).cols(), "concat_rows: column mismatch");
        let v = Tensor::vstack(&[self.value(a), self.value(b)]);
        self.push(v, Op::ConcatRows(a.0, b.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).rows(), self.value(b).rows(), "concat_cols: row mismatch");
        let v = Tensor::hstack(&[self.value(a), self.value(b)]);
        self.push(v, Op::ConcatCols(a.0, b.0))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        let v = self.value(src).reshaped(shape);
        self.push(v, Op::Reshape { src: src.0 })
    }

    /// Stack a list of column vectors (or matrices) vertically.
    pub fn concat_rows_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.concat_rows(acc, p);
        }
        acc
    }

    /// Reverse pass from a scalar root. Pure: calling twice returns bitwise
    /// identical gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_vec(self.value(root).shape(), vec![1.0]));

        for i in (0..=root.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&self.nodes[*b].value);
                    let gb = g.mul(&self.nodes[*a].value);
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Affine { x, a } => {
                    self.accum(&mut grads, *x, g.scale(*a));
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = g.matmul(&bv.transpose());
                    let gb = av.transpose().matmul(&g);
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Transpose(x) => {
                    self.accum(&mut grads, *x, g.transpose());
                }
                Op::Sum(x) => {
                    let shape = self.nodes[*x].value.shape();
                    self.accum(&mut grads, *x, Tensor::full(shape, g.item()));
                }
                Op::AddRow { m, r } => {
                    let cols = self.nodes[*m].value.cols();
                    let rows = self.nodes[*m].value.rows();
                    let mut rg = vec![0.0; cols];
                    for i2 in 0..rows {
                        for j in 0..cols {
                            rg[j] += g.at(i2, j);
                        }
                    }
                    self.accum(&mut grads, *m, g.clone());
                    let rshape = self.nodes[*r].value.shape().to_vec();
                    self.accum(&mut grads, *r, Tensor::from_vec(&rshape, rg));
                }
                Op::MulScalar { x, s } => {
                    let sv = self.nodes[*s].value.item();
                    let xs = g.mul(&self.nodes[*x].value).sum();
                    self.accum(&mut grads, *x, g.scale(sv));
                    let sshape = self.nodes[*s].value.shape().to_vec();
                    self.accum(&mut grads, *s, Tensor::from_vec(&sshape, vec![xs]));
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let gx = g.mul(&y.map(|t| 1.0 - t * t));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let gx = g.mul(&y.map(|t| t * (1.0 - t)));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.mul(&self.nodes[i].value);
                    self.accum(&mut grads, *x, gx);
                }
                Op::Ln(x) => {
                    let gx = g.mul(&self.nodes[*x].value.map(|t| 1.0 / t));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Sqrt(x) => {
                    let xv = &self.nodes[*x].value;
                    let yv = &self.nodes[i].value;
                    let data: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(yv.data())
                        .zip(g.data())
                        .map(|((&xi, &yi), &gi)| {
                            if xi <= RADIUS_GUARD_SQ {
                                0.0
                            } else {
                                gi * 0.5 / yi
                            }
                        })
                        .collect();
                    self.accum(&mut grads, *x, Tensor::from_vec(xv.shape(), data));
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let data: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    self.accum(&mut grads, *x, Tensor::from_vec(xv.shape(), data));
                }
                Op::Recip(x) => {
                    let gx = g.mul(&self.nodes[*x].value.map(|t| -1.0 / (t * t)));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Sin(x) => {
                    let gx = g.mul(&self.nodes[*x].value.map(math::cos));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Cos(x) => {
                    let gx = g.mul(&self.nodes[*x].value.map(|t| -math::sin(t)));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Atan2 { y, x } => {
                    let yv = &self.nodes[*y].value;
                    let xv = &self.nodes[*x].value;
                    let n = yv.len();
                    let mut gy = vec![0.0; n];
                    let mut gx = vec![0.0; n];
                    for k in 0..n {
                        let (ay, ax, gk) = (yv.data()[k], xv.data()[k], g.data()[k]);
                        let r2 = ay * ay + ax * ax;
                        if r2 >= RADIUS_GUARD_SQ {
                            gy[k] = gk * ax / r2;
                            gx[k] = -gk * ay / r2;
                        }
                    }
                    self.accum(&mut grads, *y, Tensor::from_vec(yv.shape(), gy));
                    self.accum(&mut grads, *x, Tensor::from_vec(xv.shape(), gx));
                }
                Op::Clip { x, lo, hi } => {
                    let xv = &self.nodes[*x].value;
                    let lov = &self.nodes[*lo].value;
                    let hiv = &self.nodes[*hi].value;
                    let n = xv.len();
                    let mut gx = vec![0.0; n];
                    let mut glo = vec![0.0; n];
                    let mut ghi = vec![0.0; n];
                    for k in 0..n {
                        let (xi, li, hi2, gk) =
                            (xv.data()[k], lov.data()[k], hiv.data()[k], g.data()[k]);
                        if xi < li {
                            glo[k] = gk;
                        } else if xi > hi2 {
                            ghi[k] = gk;
                        } else if xi > li && xi < hi2 {
                            gx[k] = gk;
                        }
                    }
                    self.accum(&mut grads, *x, Tensor::from_vec(xv.shape(), gx));
                    self.accum(&mut grads, *lo, Tensor::from_vec(lov.shape(), glo));
                    self.accum(&mut grads, *hi, Tensor::from_vec(hiv.shape(), ghi));
                }
                Op::Solve { a, b } => {
                    // x = A⁻¹ b;  ∂L/∂b = A⁻ᵀ ḡ;  ∂L/∂A = −(A⁻ᵀ ḡ) xᵀ.
                    let av = &self.nodes[*a].value;
                    let xv = &self.nodes[i].value;
                    let f = linalg::lu_factor(av).expect("solve backward re-factor");
                    let cols = g.cols();
                    let n = av.rows();
                    let mut u = Tensor::zeros(&[n, cols]);
                    let mut col = vec![0.0; n];
                    for c in 0..cols {
                        for r in 0..n {
                            col[r] = g.at(r, c);
                        }
                        let s = f.solve_transposed_vec(&col);
                        for r in 0..n {
                            u.set(r, c, s[r]);
                        }
                    }
                    let xmat = Tensor::from_vec(&[n, cols], xv.data().to_vec());
                    let ga = u.matmul(&xmat.transpose()).scale(-1.0);
                    let bshape = self.nodes[*b].value.shape().to_vec();
                    self.accum(&mut grads, *b, Tensor::from_vec(&bshape, u.into_data()));
                    self.accum(&mut grads, *a, ga);
                }
                Op::StPassthrough { ze } => {
                    self.accum(&mut grads, *ze, g);
                }
                Op::StopGrad => {}
                Op::GatherRows { src, idx } => {
                    let sshape = self.nodes[*src].value.shape();
                    let cols = self.nodes[*src].value.cols();
                    let mut gs = Tensor::zeros(sshape);
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            let v = gs.at(src_r, c) + g.at(out_r, c);
                            gs.set(src_r, c, v);
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::ShiftRows { src, block, offset } => {
                    let sv = &self.nodes[*src].value;
                    let (rows, cols) = (sv.rows(), sv.cols());
                    let mut gs = Tensor::zeros(sv.shape());
                    for bidx in 0..rows / block {
                        for j in 0..*block {
                            let i2 = j as isize + offset;
                            if i2 >= 0 && (i2 as usize) < *block {
                                for c in 0..cols {
                                    let v =
                                        gs.at(bidx * block + j, c) + g.at(bidx * block + i2 as usize, c);
                                    gs.set(bidx * block + j, c, v);
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::RepeatRows { src, times } => {
                    let sv = &self.nodes[*src].value;
                    let (rows, cols) = (sv.rows(), sv.cols());
                    let mut gs = Tensor::zeros(sv.shape());
                    for r in 0..rows {
                        for t in 0..*times {
                            for c in 0..cols {
                                let v = gs.at(r, c) + g.at(r * times + t, c);
                                gs.set(r, c, v);
                            }
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::SliceRows { src, start } => {
                    let sv = &self.nodes[*src].value;
                    let cols = sv.cols();
                    let mut gs = Tensor::zeros(sv.shape());
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            gs.set(start + r, c, g.at(r, c));
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::SliceCols { src, start } => {
                    let sv = &self.nodes[*src].value;
                    let mut gs = Tensor::zeros(sv.shape());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gs.set(r, start + c, g.at(r, c));
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.rows();
                    let ga = g.slice_rows(0, ra);
                    let gb = g.slice_rows(ra, g.rows() - ra);
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let bshape = self.nodes[*b].value.shape().to_vec();
                    self.accum(&mut grads, *a, Tensor::from_vec(&ashape, ga.into_data()));
                    self.accum(&mut grads, *b, Tensor::from_vec(&bshape, gb.into_data()));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let rows = g.rows();
                    let mut ga = Tensor::zeros(&[rows, ca]);
                    let cb = g.cols() - ca;
                    let mut gb = Tensor::zeros(&[rows, cb]);
                    for r in 0..rows {
                        for c in 0..ca {
                            ga.set(r, c, g.at(r, c));
                        }
                        for c in 0..cb {
                            gb.set(r, c, g.at(r, ca + c));
                        }
                    }
                    let ashape = self.nodes[*a].value.shape().to_vec();
                    let bshape = self.nodes[*b].value.shape().to_vec();
                    self.accum(&mut grads, *a, Tensor::from_vec(&ashape, ga.into_data()));
                    self.accum(&mut grads, *b, Tensor::from_vec(&bshape, gb.into_data()));
                }
                Op::Reshape { src } => {
                    let sshape = self.nodes[*src].value.shape().to_vec();
                    self.accum(&mut grads, *src, Tensor::from_vec(&sshape, g.data().to_vec()));
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        debug_assert_eq!(self.nodes[idx].value.len(), delta.len());
        let shaped = Tensor::from_vec(self.nodes[idx].value.shape(), delta.into_data());
        match &mut grads[idx] {
            Some(g) => *g = g.add(&shaped),
            slot @ None => *slot = Some(shaped),
        }
    }
}
