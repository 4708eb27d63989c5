//! Tape-based reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] owns an arena of nodes recorded during the forward pass. Every
//! [`Tensor`] is a cheap `Copy` handle (tape reference + node id). Calling
//! [`Tensor::backward`] on a scalar replays the arena in reverse and returns a
//! [`Gradients`] map from leaf tensors to `d(root)/d(leaf)`.
//!
//! The tape lives for one training step and is dropped afterwards; no
//! higher-order derivatives. Everything is f64 so finite-difference checks
//! ([`grad_check`]) resolve well below the tolerances used in tests.

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Shapes are at most rank 2: everything in this crate is a scalar, a vector,
/// or a matrix (masks are kept flattened).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn scalar() -> Shape {
        Shape::Vector(1)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// out = scale * x + shift
    Affine { x: NodeId, scale: f64, shift: f64 },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    /// mat[r x c] + row[c], broadcast over rows
    AddRow { mat: NodeId, row: NodeId },
    /// x * s where s is a one-element tensor
    MulScalarT { x: NodeId, s: NodeId },
    /// x / s where s is a one-element tensor
    DivScalarT { x: NodeId, s: NodeId },
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// x^p for x >= 0
    PowScalar { x: NodeId, p: f64 },
    /// clamp to [lo, hi]; gradient passes only strictly inside
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, r: usize, c: usize },
    /// axis 1: normalize each row; axis 0: normalize each column
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    SumAll(NodeId),
    /// 2-D reduction along `axis` (0: down columns -> [c], 1: across rows -> [r])
    SumAxis { x: NodeId, axis: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    SliceRows { x: NodeId, start: usize, end: usize },
    SliceCols { x: NodeId, start: usize, end: usize },
    /// out[i] = table[indices[i], :]
    Embed { table: NodeId, indices: Vec<usize> },
    /// per-row layer norm with learnable gain/bias
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Reshape { x: NodeId },
}

struct Node {
    shape: Shape,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Arena of recorded operations for one forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle into a [`Tape`]. Copyable; all state lives in the tape.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: NodeId,
    shape: Shape,
}

/// Gradients of one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `t`, if any flowed to it.
    pub fn get(&self, t: Tensor<'_>) -> Option<&[f64]> {
        self.grads[t.id.0].as_deref()
    }

    /// Gradient for `t`, zeros when nothing flowed.
    pub fn get_or_zeros(&self, t: Tensor<'_>) -> Vec<f64> {
        self.grads[t.id.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; t.shape.numel()])
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Shape, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor<'_> {
        debug_assert_eq!(shape.numel(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { shape, data, requires_grad, op });
        Tensor { tape: self, id, shape }
    }

    /// New leaf tensor. `requires_grad` leaves receive entries in [`Gradients`].
    pub fn leaf(&self, data: Vec<f64>, shape: Shape, requires_grad: bool) -> Result<Tensor<'_>> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "leaf data has {} elements, shape {} wants {}",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Leaf with `requires_grad = false`.
    pub fn constant(&self, data: Vec<f64>, shape: Shape) -> Result<Tensor<'_>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(Shape::scalar(), vec![v], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: Shape) -> Tensor<'_> {
        self.push(shape, vec![0.0; shape.numel()], false, Op::Leaf)
    }

    fn with_node<R>(&self, id: NodeId, f: impl FnOnce(&Node) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id.0])
    }
}

fn same_tape(a: &Tape, b: &Tape) -> bool {
    std::ptr::eq(a, b)
}

// Numerically stable scalar helpers used by forwards and by plain f64 code.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        let e = (s - m).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_softmax_into(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = src.iter().map(|&s| (s - m).exp()).sum::<f64>().ln() + m;
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = s - lse;
    }
}

impl<'t> Tensor<'t> {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<f64> {
        self.tape.with_node(self.id, |n| n.data.clone())
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {}",
                self.shape
            )));
        }
        Ok(self.tape.with_node(self.id, |n| n.data[0]))
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape {
            Shape::Vector(n) => (1, n),
            Shape::Matrix(r, c) => (r, c),
        }
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(NodeId) -> Op,
    ) -> Tensor<'t> {
        let rg = self.requires_grad();
        let data = self.tape.with_node(self.id, |n| n.data.iter().map(|&v| f(v)).collect());
        self.tape.push(self.shape, data, rg, op(self.id))
    }

    fn binary(
        &self,
        rhs: Tensor<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<Tensor<'t>> {
        if !same_tape(self.tape, rhs.tape) {
            return Err(Error::Contract(format!("{name}: operands on different tapes")));
        }
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "{name}: {} vs {}",
                self.shape, rhs.shape
            )));
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id.0].data;
            let b = &nodes[rhs.id.0].data;
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.tape.push(self.shape, data, rg, op(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div)
    }

    pub fn min(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "min", f64::min, Op::Min)
    }

    pub fn max(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "max", f64::max, Op::Max)
    }

    pub fn scale(&self, s: f64) -> Tensor<'t> {
        self.unary(|v| s * v, |x| Op::Affine { x, scale: s, shift: 0.0 })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'t> {
        self.unary(|v| v + c, |x| Op::Affine { x, scale: 1.0, shift: c })
    }

    pub fn neg(&self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor<'t> {
        self.unary(f64::exp, Op::Exp)
    }

    /// Natural log. Domain: strictly positive input (clamp first when in doubt).
    pub fn ln(&self) -> Tensor<'t> {
        self.unary(f64::ln, Op::Ln)
    }

    pub fn sqrt(&self) -> Tensor<'t> {
        self.unary(f64::sqrt, Op::Sqrt)
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.unary(|v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        self.unary(sigmoid, Op::Sigmoid)
    }

    /// x^p elementwise; domain x >= 0.
    pub fn pow_scalar(&self, p: f64) -> Tensor<'t> {
        self.unary(|v| v.powf(p), |x| Op::PowScalar { x, p })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<'t> {
        self.unary(|v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor<'t> {
        self.clamp(lo, f64::INFINITY)
    }

    /// Broadcast add of a row vector over every row of a matrix.
    pub fn add_row(&self, row: Tensor<'t>) -> Result<Tensor<'t>> {
        let (r, c) = match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("add_row: lhs must be a matrix, got {}", self.shape))),
        };
        match row.shape {
            Shape::Vector(n) if n == c => {}
            s => return Err(Error::Shape(format!("add_row: row {s} vs {c} columns"))),
        }
        let rg = self.requires_grad() || row.requires_grad();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let m = &nodes[self.id.0].data;
            let v = &nodes[row.id.0].data;
            let mut out = m.clone();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += v[j];
                }
            }
            out
        };
        Ok(self
            .tape
            .push(self.shape, data, rg, Op::AddRow { mat: self.id, row: row.id }))
    }

    /// Multiply by a one-element tensor (broadcast scalar).
    pub fn mul_scalar_t(&self, s: Tensor<'t>) -> Result<Tensor<'t>> {
        if s.numel() != 1 {
            return Err(Error::Shape(format!("mul_scalar_t: scale has shape {}", s.shape)));
        }
        let sv = s.tape.with_node(s.id, |n| n.data[0]);
        let rg = self.requires_grad() || s.requires_grad();
        let data = self
            .tape
            .with_node(self.id, |n| n.data.iter().map(|&v| v * sv).collect());
        Ok(self
            .tape
            .push(self.shape, data, rg, Op::MulScalarT { x: self.id, s: s.id }))
    }

    /// Divide by a one-element tensor (broadcast scalar).
    pub fn div_scalar_t(&self, s: Tensor<'t>) -> Result<Tensor<'t>> {
        if s.numel() != 1 {
            return Err(Error::Shape(format!("div_scalar_t: divisor has shape {}", s.shape)));
        }
        let sv = s.tape.with_node(s.id, |n| n.data[0]);
        let rg = self.requires_grad() || s.requires_grad();
        let data = self
            .tape
            .with_node(self.id, |n| n.data.iter().map(|&v| v / sv).collect());
        Ok(self
            .tape
            .push(self.shape, data, rg, Op::DivScalarT { x: self.id, s: s.id }))
    }

    pub fn matmul(&self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        let (m, k1) = match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("matmul: lhs must be a matrix, got {}", self.shape))),
        };
        let (k2, n) = match rhs.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("matmul: rhs must be a matrix, got {}", rhs.shape))),
        };
        if k1 != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {} vs {}",
                self.shape, rhs.shape
            )));
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id.0].data;
            let b = &nodes[rhs.id.0].data;
            matmul_raw(a, b, m, k1, n)
        };
        Ok(self.tape.push(
            Shape::Matrix(m, n),
            data,
            rg,
            Op::Matmul { a: self.id, b: rhs.id, m, k: k1, n },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<'t>> {
        let (r, c) = match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("transpose: need matrix, got {}", self.shape))),
        };
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id.0].data;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Shape::Matrix(c, r), data, rg, Op::Transpose { x: self.id, r, c }))
    }

    fn check_axis(&self, axis: usize, name: &str) -> Result<()> {
        match (self.shape, axis) {
            (Shape::Vector(_), 0) => Ok(()),
            (Shape::Matrix(_, _), 0 | 1) => Ok(()),
            _ => Err(Error::Shape(format!("{name}: axis {axis} invalid for {}", self.shape))),
        }
    }

    /// Stable softmax along `axis`. Vectors use axis 0.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        self.check_axis(axis, "softmax")?;
        let data = self.softmax_like(axis, softmax_into);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(self.shape, data, rg, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        self.check_axis(axis, "log_softmax")?;
        let data = self.softmax_like(axis, log_softmax_into);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(self.shape, data, rg, Op::LogSoftmax { x: self.id, axis }))
    }

    fn softmax_like(&self, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id.0].data;
        let (r, c) = self.rows_cols();
        let mut out = vec![0.0; x.len()];
        let norm_rows = match self.shape {
            Shape::Vector(_) => true,
            Shape::Matrix(_, _) => axis == 1,
        };
        if norm_rows {
            for i in 0..r {
                f(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
            }
        } else {
            let mut col = vec![0.0; r];
            let mut res = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = x[i * c + j];
                }
                f(&col, &mut res);
                for i in 0..r {
                    out[i * c + j] = res[i];
                }
            }
        }
        out
    }

    pub fn sum(&self) -> Tensor<'t> {
        let s = self.tape.with_node(self.id, |n| n.data.iter().sum());
        let rg = self.requires_grad();
        self.tape
            .push(Shape::scalar(), vec![s], rg, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Tensor<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of a matrix along `axis` (0 collapses rows -> [cols], 1 collapses cols -> [rows]).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<'t>> {
        let (r, c) = match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("sum_axis: need matrix, got {}", self.shape))),
        };
        if axis > 1 {
            return Err(Error::Shape(format!("sum_axis: axis {axis} invalid")));
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id.0].data;
            if axis == 0 {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += x[i * c + j];
                    }
                }
                out
            } else {
                let mut out = vec![0.0; r];
                for i in 0..r {
                    out[i] = x[i * c..(i + 1) * c].iter().sum();
                }
                out
            }
        };
        let shape = Shape::Vector(if axis == 0 { c } else { r });
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(shape, data, rg, Op::SumAxis { x: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<'t>> {
        let (r, c) = match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("mean_axis: need matrix, got {}", self.shape))),
        };
        let n = if axis == 0 { r } else { c } as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<'t>> {
        let (r, c) = match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("slice_rows: need matrix, got {}", self.shape))),
        };
        if start >= end || end > r {
            return Err(Error::Shape(format!("slice_rows: [{start},{end}) out of {r} rows")));
        }
        let data = self
            .tape
            .with_node(self.id, |n| n.data[start * c..end * c].to_vec());
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Shape::Matrix(end - start, c),
            data,
            rg,
            Op::SliceRows { x: self.id, start, end },
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<'t>> {
        let (r, c) = match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::Shape(format!("slice_cols: need matrix, got {}", self.shape))),
        };
        if start >= end || end > c {
            return Err(Error::Shape(format!("slice_cols: [{start},{end}) out of {c} cols")));
        }
        let w = end - start;
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id.0].data;
            let mut out = vec![0.0; r * w];
            for i in 0..r {
                out[i * w..(i + 1) * w].copy_from_slice(&x[i * c + start..i * c + end]);
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Shape::Matrix(r, w),
            data,
            rg,
            Op::SliceCols { x: self.id, start, end },
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor<'t>> {
        let c = match self.shape {
            Shape::Matrix(_, c) => c,
            _ => return Err(Error::Shape(format!("row: need matrix, got {}", self.shape))),
        };
        self.slice_rows(i, i + 1)?.reshape(Shape::Vector(c))
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor<'t>> {
        if shape.numel() != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {} -> {} changes element count",
                self.shape, shape
            )));
        }
        let data = self.value();
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, data, rg, Op::Reshape { x: self.id }))
    }

    /// log(sum(exp(x))) over the whole tensor, stable via constant max-shift.
    pub fn logsumexp(&self) -> Result<Tensor<'t>> {
        let m = self
            .value()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        // The shift is a constant, so gradients stay exact: d/dx = softmax(x).
        let shifted = self.add_scalar(-m);
        Ok(shifted.exp().sum().ln().add_scalar(m))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&self, gamma: Tensor<'t>, beta: Tensor<'t>, eps: f64) -> Result<Tensor<'t>> {
        let (r, c) = self.rows_cols();
        match (gamma.shape, beta.shape) {
            (Shape::Vector(g), Shape::Vector(b)) if g == c && b == c => {}
            _ => {
                return Err(Error::Shape(format!(
                    "layer_norm: gamma {} beta {} vs {c} features",
                    gamma.shape, beta.shape
                )))
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id.0].data;
            let g = &nodes[gamma.id.0].data;
            let b = &nodes[beta.id.0].data;
            let mut out = vec![0.0; x.len()];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mu) * inv * g[j] + b[j];
                }
            }
            out
        };
        Ok(self.tape.push(
            self.shape,
            data,
            rg,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps },
        ))
    }

    /// Gather rows of an embedding table.
    pub fn embed(&self, indices: &[usize]) -> Result<Tensor<'t>> {
        let (v, c) = match self.shape {
            Shape::Matrix(v, c) => (v, c),
            _ => return Err(Error::Shape(format!("embed: table must be a matrix, got {}", self.shape))),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("embed: index {bad} out of vocab {v}")));
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id.0].data;
            let mut out = Vec::with_capacity(indices.len() * c);
            for &ix in indices {
                out.extend_from_slice(&t[ix * c..(ix + 1) * c]);
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Shape::Matrix(indices.len(), c),
            data,
            rg,
            Op::Embed { table: self.id, indices: indices.to_vec() },
        ))
    }

    /// Backward pass from a scalar root. Returns gradients for every
    /// `requires_grad` node reached by the chain rule.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got {}",
                self.shape
            )));
        }
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id.0] = Some(vec![1.0]);

        // Node ids are already topologically ordered (inputs precede outputs).
        for id in (0..=self.id.0).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let dy = grads[id].take().unwrap();
            backward_op(&nodes, id, &dy, &mut grads);
            // Leaves keep their accumulated gradient for readback.
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, &ci) in g.iter_mut().zip(contrib.iter()) {
                *gi += ci;
            }
        }
        None => grads[id.0] = Some(contrib.to_vec()),
    }
}

#[allow(clippy::too_many_lines)]
fn backward_op(nodes: &[Node], id: usize, dy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
    let rg = |nid: NodeId| nodes[nid.0].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Affine { x, scale, .. } => {
            if rg(*x) {
                let d: Vec<f64> = dy.iter().map(|&g| g * scale).collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, dy);
            }
            if rg(*b) {
                accumulate(grads, *b, dy);
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, dy);
            }
            if rg(*b) {
                let d: Vec<f64> = dy.iter().map(|&g| -g).collect();
                accumulate(grads, *b, &d);
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let bd = &nodes[b.0].data;
                let d: Vec<f64> = dy.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                accumulate(grads, *a, &d);
            }
            if rg(*b) {
                let ad = &nodes[a.0].data;
                let d: Vec<f64> = dy.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                accumulate(grads, *b, &d);
            }
        }
        Op::Div(a, b) => {
            let bd = &nodes[b.0].data;
            if rg(*a) {
                let d: Vec<f64> = dy.iter().zip(bd.iter()).map(|(&g, &v)| g / v).collect();
                accumulate(grads, *a, &d);
            }
            if rg(*b) {
                let ad = &nodes[a.0].data;
                let d: Vec<f64> = dy
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                    .collect();
                accumulate(grads, *b, &d);
            }
        }
        Op::Min(a, b) | Op::Max(a, b) => {
            // Winner takes the gradient; ties go to the left operand.
            let is_min = matches!(nodes[id].op, Op::Min(_, _));
            let ad = &nodes[a.0].data;
            let bd = &nodes[b.0].data;
            let a_wins =
                |av: f64, bv: f64| if is_min { av <= bv } else { av >= bv };
            if rg(*a) {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&g, (&av, &bv))| if a_wins(av, bv) { g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &d);
            }
            if rg(*b) {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&g, (&av, &bv))| if a_wins(av, bv) { 0.0 } else { g })
                    .collect();
                accumulate(grads, *b, &d);
            }
        }
        Op::AddRow { mat, row } => {
            let c = match nodes[row.0].shape {
                Shape::Vector(c) => c,
                _ => unreachable!(),
            };
            if rg(*mat) {
                accumulate(grads, *mat, dy);
            }
            if rg(*row) {
                let mut d = vec![0.0; c];
                for (i, &g) in dy.iter().enumerate() {
                    d[i % c] += g;
                }
                accumulate(grads, *row, &d);
            }
        }
        Op::MulScalarT { x, s } => {
            let sv = nodes[s.0].data[0];
            if rg(*x) {
                let d: Vec<f64> = dy.iter().map(|&g| g * sv).collect();
                accumulate(grads, *x, &d);
            }
            if rg(*s) {
                let xd = &nodes[x.0].data;
                let d = dy.iter().zip(xd.iter()).map(|(&g, &v)| g * v).sum();
                accumulate(grads, *s, &[d]);
            }
        }
        Op::DivScalarT { x, s } => {
            let sv = nodes[s.0].data[0];
            if rg(*x) {
                let d: Vec<f64> = dy.iter().map(|&g| g / sv).collect();
                accumulate(grads, *x, &d);
            }
            if rg(*s) {
                let xd = &nodes[x.0].data;
                let d = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| -g * v / (sv * sv))
                    .sum();
                accumulate(grads, *s, &[d]);
            }
        }
        Op::Exp(x) => {
            if rg(*x) {
                let out = &nodes[id].data;
                let d: Vec<f64> = dy.iter().zip(out.iter()).map(|(&g, &o)| g * o).collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::Ln(x) => {
            if rg(*x) {
                let xd = &nodes[x.0].data;
                let d: Vec<f64> = dy.iter().zip(xd.iter()).map(|(&g, &v)| g / v).collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::Sqrt(x) => {
            if rg(*x) {
                let out = &nodes[id].data;
                let d: Vec<f64> = dy
                    .iter()
                    .zip(out.iter())
                    .map(|(&g, &o)| g * 0.5 / o)
                    .collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::Relu(x) => {
            if rg(*x) {
                let xd = &nodes[x.0].data;
                let d: Vec<f64> = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::Sigmoid(x) => {
            if rg(*x) {
                let out = &nodes[id].data;
                let d: Vec<f64> = dy
                    .iter()
                    .zip(out.iter())
                    .map(|(&g, &o)| g * o * (1.0 - o))
                    .collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::PowScalar { x, p } => {
            if rg(*x) {
                let xd = &nodes[x.0].data;
                let d: Vec<f64> = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| {
                        if v == 0.0 && *p >= 1.0 {
                            0.0
                        } else {
                            g * p * v.powf(p - 1.0)
                        }
                    })
                    .collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::Clamp { x, lo, hi } => {
            if rg(*x) {
                let xd = &nodes[x.0].data;
                let d: Vec<f64> = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &d);
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if rg(*a) {
                // dA = dY . B^T
                let bd = &nodes[b.0].data;
                let mut bt = vec![0.0; n * k];
                for i in 0..k {
                    for j in 0..n {
                        bt[j * k + i] = bd[i * n + j];
                    }
                }
                let d = matmul_raw(dy, &bt, m, n, k);
                accumulate(grads, *a, &d);
            }
            if rg(*b) {
                // dB = A^T . dY
                let ad = &nodes[a.0].data;
                let mut at = vec![0.0; k * m];
                for i in 0..m {
                    for j in 0..k {
                        at[j * m + i] = ad[i * k + j];
                    }
                }
                let d = matmul_raw(&at, dy, k, m, n);
                accumulate(grads, *b, &d);
            }
        }
        Op::Transpose { x, r, c } => {
            if rg(*x) {
                let mut d = vec![0.0; r * c];
                for i in 0..*r {
                    for j in 0..*c {
                        d[i * c + j] = dy[j * r + i];
                    }
                }
                accumulate(grads, *x, &d);
            }
        }
        Op::Softmax { x, axis } => {
            if rg(*x) {
                let out = &nodes[id].data;
                let (r, c) = match nodes[id].shape {
                    Shape::Vector(n) => (1, n),
                    Shape::Matrix(r, c) => (r, c),
                };
                let rows = match nodes[id].shape {
                    Shape::Vector(_) => true,
                    Shape::Matrix(_, _) => *axis == 1,
                };
                let mut d = vec![0.0; out.len()];
                if rows {
                    for i in 0..r {
                        let s = &out[i * c..(i + 1) * c];
                        let g = &dy[i * c..(i + 1) * c];
                        let dot: f64 = s.iter().zip(g.iter()).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..c {
                            d[i * c + j] = s[j] * (g[j] - dot);
                        }
                    }
                } else {
                    for j in 0..c {
                        let mut dot = 0.0;
                        for i in 0..r {
                            dot += out[i * c + j] * dy[i * c + j];
                        }
                        for i in 0..r {
                            d[i * c + j] = out[i * c + j] * (dy[i * c + j] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
        }
        Op::LogSoftmax { x, axis } => {
            if rg(*x) {
                let out = &nodes[id].data;
                let (r, c) = match nodes[id].shape {
                    Shape::Vector(n) => (1, n),
                    Shape::Matrix(r, c) => (r, c),
                };
                let rows = match nodes[id].shape {
                    Shape::Vector(_) => true,
                    Shape::Matrix(_, _) => *axis == 1,
                };
                let mut d = vec![0.0; out.len()];
                if rows {
                    for i in 0..r {
                        let o = &out[i * c..(i + 1) * c];
                        let g = &dy[i * c..(i + 1) * c];
                        let gsum: f64 = g.iter().sum();
                        for j in 0..c {
                            d[i * c + j] = g[j] - o[j].exp() * gsum;
                        }
                    }
                } else {
                    for j in 0..c {
                        let mut gsum = 0.0;
                        for i in 0..r {
                            gsum += dy[i * c + j];
                        }
                        for i in 0..r {
                            d[i * c + j] = dy[i * c + j] - out[i * c + j].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
        }
        Op::SumAll(x) => {
            if rg(*x) {
                let n = nodes[x.0].data.len();
                let d = vec![dy[0]; n];
                accumulate(grads, *x, &d);
            }
        }
        Op::SumAxis { x, axis } => {
            if rg(*x) {
                let (r, c) = match nodes[x.0].shape {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let mut d = vec![0.0; r * c];
                if *axis == 0 {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = dy[j];
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = dy[i];
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].data.len();
                    if rg(*p) {
                        accumulate(grads, *p, &dy[offset..offset + n]);
                    }
                    offset += n;
                }
            } else {
                let r = match nodes[id].shape {
                    Shape::Matrix(r, _) => r,
                    _ => unreachable!(),
                };
                let total_c = match nodes[id].shape {
                    Shape::Matrix(_, c) => c,
                    _ => unreachable!(),
                };
                let mut col = 0;
                for p in parts {
                    let pc = match nodes[p.0].shape {
                        Shape::Matrix(_, c) => c,
                        Shape::Vector(c) => c,
                    };
                    if rg(*p) {
                        let mut d = vec![0.0; r * pc];
                        for i in 0..r {
                            d[i * pc..(i + 1) * pc]
                                .copy_from_slice(&dy[i * total_c + col..i * total_c + col + pc]);
                        }
                        accumulate(grads, *p, &d);
                    }
                    col += pc;
                }
            }
        }
        Op::SliceRows { x, start, end } => {
            if rg(*x) {
                let (r, c) = match nodes[x.0].shape {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let mut d = vec![0.0; r * c];
                d[start * c..end * c].copy_from_slice(dy);
                accumulate(grads, *x, &d);
            }
        }
        Op::SliceCols { x, start, end } => {
            if rg(*x) {
                let (r, c) = match nodes[x.0].shape {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let w = end - start;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + end].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, &d);
            }
        }
        Op::Embed { table, indices } => {
            if rg(*table) {
                let (v, c) = match nodes[table.0].shape {
                    Shape::Matrix(v, c) => (v, c),
                    _ => unreachable!(),
                };
                let mut d = vec![0.0; v * c];
                for (i, &ix) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[ix * c + j] += dy[i * c + j];
                    }
                }
                accumulate(grads, *table, &d);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (r, c) = match nodes[x.0].shape {
                Shape::Vector(n) => (1, n),
                Shape::Matrix(r, c) => (r, c),
            };
            let xd = &nodes[x.0].data;
            let g = &nodes[gamma.0].data;
            let mut dx = vec![0.0; r * c];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let gy = &dy[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                let dxhat: Vec<f64> = gy.iter().zip(g.iter()).map(|(&a, &b)| a * b).collect();
                let m1 = dxhat.iter().sum::<f64>() / c as f64;
                let m2 = dxhat
                    .iter()
                    .zip(xhat.iter())
                    .map(|(&a, &b)| a * b)
                    .sum::<f64>()
                    / c as f64;
                for j in 0..c {
                    dx[i * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    dgamma[j] += gy[j] * xhat[j];
                    dbeta[j] += gy[j];
                }
            }
            if rg(*x) {
                accumulate(grads, *x, &dx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, &dgamma);
            }
            if rg(*beta) {
                accumulate(grads, *beta, &dbeta);
            }
        }
        Op::Reshape { x } => {
            if rg(*x) {
                accumulate(grads, *x, dy);
            }
        }
    }
}

/// Concatenate tensors along `axis` (0: stack rows / append vectors,
/// 1: append columns of matrices with equal row counts).
pub fn concat<'t>(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat: empty input".into()));
    }
    let tape = parts[0].tape;
    if parts.iter().any(|p| !same_tape(p.tape, tape)) {
        return Err(Error::Contract("concat: operands on different tapes".into()));
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    match axis {
        0 => {
            let shape = match parts[0].shape {
                Shape::Vector(_) => {
                    let total: usize = parts
                        .iter()
                        .map(|p| match p.shape {
                            Shape::Vector(n) => Ok(n),
                            s => Err(Error::Shape(format!("concat axis 0: mixed shapes ({s})"))),
                        })
                        .sum::<Result<usize>>()?;
                    Shape::Vector(total)
                }
                Shape::Matrix(_, c) => {
                    let mut rows = 0;
                    for p in parts {
                        match p.shape {
                            Shape::Matrix(r, pc) if pc == c => rows += r,
                            s => {
                                return Err(Error::Shape(format!(
                                    "concat axis 0: {s} vs {c} columns"
                                )))
                            }
                        }
                    }
                    Shape::Matrix(rows, c)
                }
            };
            let mut data = Vec::with_capacity(shape.numel());
            {
                let nodes = tape.nodes.borrow();
                for p in parts {
                    data.extend_from_slice(&nodes[p.id.0].data);
                }
            }
            Ok(tape.push(shape, data, rg, Op::Concat { parts: ids, axis: 0 }))
        }
        1 => {
            let r = match parts[0].shape {
                Shape::Matrix(r, _) => r,
                s => return Err(Error::Shape(format!("concat axis 1: need matrices, got {s}"))),
            };
            let mut total_c = 0;
            for p in parts {
                match p.shape {
                    Shape::Matrix(pr, pc) if pr == r => total_c += pc,
                    s => return Err(Error::Shape(format!("concat axis 1: {s} vs {r} rows"))),
                }
            }
            let mut data = vec![0.0; r * total_c];
            {
                let nodes = tape.nodes.borrow();
                let mut col = 0;
                for p in parts {
                    let pc = match p.shape {
                        Shape::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    let pd = &nodes[p.id.0].data;
                    for i in 0..r {
                        data[i * total_c + col..i * total_c + col + pc]
                            .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
                    }
                    col += pc;
                }
            }
            Ok(tape.push(
                Shape::Matrix(r, total_c),
                data,
                rg,
                Op::Concat { parts: ids, axis: 1 },
            ))
        }
        _ => Err(Error::Shape(format!("concat: axis {axis} invalid"))),
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference: `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
///
/// `f` must build a scalar from the supplied leaf on the supplied tape.
pub fn grad_check<F>(f: F, x: &[f64], shape: Shape, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Tensor<'_>) -> Result<Tensor<'_>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check: eps {eps} outside [1e-7, 1e-3]")));
    }
    if shape.numel() != x.len() {
        return Err(Error::Shape(format!(
            "grad_check: {} values vs shape {}",
            x.len(),
            shape
        )));
    }

    let eval = |data: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.leaf(data, shape, false)?;
        let y = f(&tape, leaf)?;
        y.scalar_value()
    };

    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.to_vec(), shape, true)?;
        let y = f(&tape, leaf)?;
        let y0 = y.scalar_value()?;
        if !y0.is_finite() {
            return Err(Error::Domain(format!("grad_check: f(x) = {y0} is not finite")));
        }
        let grads = y.backward()?;
        grads.get_or_zeros(leaf)
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_leaf<'t>(tape: &'t Tape, v: &[f64]) -> Tensor<'t> {
        tape.leaf(v.to_vec(), Shape::Vector(v.len()), true).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = tape
            .leaf(vec![1.0, 0.0, 0.0, 1.0], Shape::Matrix(2, 2), false)
            .unwrap();
        let out = i2.matmul(i2).unwrap();
        assert_eq!(out.value(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = tape
            .leaf(vec![1.0, 2.0, 3.0, 4.0], Shape::Matrix(2, 2), false)
            .unwrap();
        let b = tape.leaf(vec![1.0, 1.0], Shape::Matrix(2, 1), false).unwrap();
        let out = a.matmul(b).unwrap();
        assert_eq!(out.value(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let tape = Tape::new();
        let z = tape.leaf(vec![0.0; 6], Shape::Matrix(2, 3), false).unwrap();
        let b = tape
            .leaf((0..12).map(|i| i as f64).collect(), Shape::Matrix(3, 4), false)
            .unwrap();
        let out = z.matmul(b).unwrap();
        assert_eq!(out.shape(), Shape::Matrix(2, 4));
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], Shape::Matrix(2, 3), false).unwrap();
        let b = tape.leaf(vec![0.0; 8], Shape::Matrix(4, 2), false).unwrap();
        assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, &[0.0, 0.0, 0.0]);
        let s = x.softmax(0).unwrap().value();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = vec_leaf(&tape, &[2.0f64.ln(), 0.0]);
        let s = y.softmax(0).unwrap().value();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_stable() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, &[1000.0, 0.0]);
        let s = x.softmax(0).unwrap().value();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let data: Vec<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = tape.leaf(data, Shape::Matrix(4, 5), false).unwrap();
        for axis in [0, 1] {
            let s = x.softmax(axis).unwrap();
            let sums = s.sum_axis(axis).unwrap().value();
            for v in sums {
                assert!((v - 1.0).abs() < 1e-12, "axis {axis}: row sum {v}");
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, &[1.0, 2.0, 3.0]);
        let grads = x.sum().backward().unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_at_three() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, &[3.0]);
        let y = x.mul(x).unwrap().sum();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, &[1.0, 2.0]);
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let err = grad_check(
            |_, x| Ok(x.mul(x)?.sum()),
            &[0.5, -1.5, 2.0],
            Shape::Vector(3),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let err = grad_check(
            |tape, _| Ok(tape.scalar(4.0)),
            &[1.0, 2.0],
            Shape::Vector(2),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let r = grad_check(|_, x| Ok(x.sum()), &[1.0], Shape::Vector(1), 1e-2);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    /// Every registered op composed into a scalar must match finite differences.
    #[test]
    fn grad_check_op_battery() {
        type Case = (&'static str, fn(&Tape, Tensor<'_>) -> Result<Tensor<'_>>);
        let cases: Vec<Case> = vec![
            ("add", |t, x| {
                let c = t.constant(vec![0.3; 6], x.shape())?;
                Ok(x.add(c)?.mul(x)?.sum())
            }),
            ("sub_div", |t, x| {
                let c = t.constant(vec![2.0; 6], x.shape())?;
                Ok(x.sub(c)?.div(c)?.sum())
            }),
            ("min_max", |t, x| {
                let c = t.constant(vec![0.1; 6], x.shape())?;
                Ok(x.min(c)?.add(x.max(c)?)?.mul(x)?.sum())
            }),
            ("exp_ln", |_, x| Ok(x.exp().add_scalar(1.0).ln().sum())),
            ("sqrt", |_, x| Ok(x.mul(x)?.add_scalar(1.0).sqrt().sum())),
            ("relu_sigmoid", |_, x| Ok(x.relu().add(x.sigmoid())?.sum())),
            ("pow", |_, x| Ok(x.mul(x)?.add_scalar(0.5).pow_scalar(1.7).sum())),
            ("softmax", |_, x| {
                let m = x.reshape(Shape::Matrix(2, 3))?;
                Ok(m.softmax(1)?.mul(m.softmax(0)?)?.sum())
            }),
            ("log_softmax", |_, x| {
                let m = x.reshape(Shape::Matrix(2, 3))?;
                Ok(m.log_softmax(1)?.mul(m)?.sum())
            }),
            ("matmul_transpose", |t, x| {
                let m = x.reshape(Shape::Matrix(2, 3))?;
                let w = t.constant(vec![0.2, -0.4, 0.6, 0.1, -0.3, 0.5], Shape::Matrix(3, 2))?;
                Ok(m.matmul(w)?.matmul(m.transpose()?.matmul(w)?.transpose()?)?.sum())
            }),
            ("sum_axis_mean", |_, x| {
                let m = x.reshape(Shape::Matrix(2, 3))?;
                Ok(m.sum_axis(0)?.mul(m.mean_axis(0)?)?.sum().add(m.sum_axis(1)?.sum())?)
            }),
            ("slices_concat", |_, x| {
                let m = x.reshape(Shape::Matrix(2, 3))?;
                let left = m.slice_cols(0, 2)?;
                let right = m.slice_cols(2, 3)?;
                let back = concat(&[left, right], 1)?;
                let top = back.slice_rows(0, 1)?;
                let stacked = concat(&[top, back.slice_rows(1, 2)?], 0)?;
                Ok(stacked.mul(m)?.sum())
            }),
            ("add_row_scalar_t", |t, x| {
                let m = x.reshape(Shape::Matrix(2, 3))?;
                let row = t.constant(vec![0.5, -0.5, 0.25], Shape::Vector(3))?;
                let s = m.sum().mul_scalar_t(m.mean())?;
                Ok(m.add_row(row)?.sum().add(s)?.div_scalar_t(m.sum().add_scalar(9.0))?)
            }),
            ("layer_norm", |t, x| {
                let m = x.reshape(Shape::Matrix(2, 3))?;
                let gamma = t.leaf(vec![1.1, 0.9, 1.0], Shape::Vector(3), false)?;
                let beta = t.leaf(vec![0.0, 0.1, -0.1], Shape::Vector(3), false)?;
                Ok(m.layer_norm(gamma, beta, 1e-5)?.mul(m)?.sum())
            }),
            ("clamp_logsumexp", |_, x| {
                Ok(x.clamp(-0.8, 0.8).logsumexp()?)
            }),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (name, f) in cases {
            for trial in 0..8 {
                let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..1.5)).collect();
                let err = grad_check(f, &x, Shape::Vector(6), 1e-5).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: err = {err}");
            }
        }
    }

    #[test]
    fn grad_check_embed_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |_, t| {
                let m = t.reshape(Shape::Matrix(4, 3))?;
                Ok(m.embed(&[0, 2, 2, 1])?.mul(m.embed(&[3, 3, 0, 1])?)?.sum())
            },
            &table,
            Shape::Vector(12),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn layer_norm_rows_normalized() {
        let tape = Tape::new();
        let x = tape
            .leaf(vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0], Shape::Matrix(2, 4), false)
            .unwrap();
        let gamma = tape.leaf(vec![1.0; 4], Shape::Vector(4), false).unwrap();
        let beta = tape.leaf(vec![0.0; 4], Shape::Vector(4), false).unwrap();
        let out = x.layer_norm(gamma, beta, 1e-9).unwrap().value();
        for i in 0..2 {
            let row = &out[i * 4..(i + 1) * 4];
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let x = tape.leaf(data, Shape::Matrix(3, 4), true).unwrap();
            let w = tape
                .leaf((0..8).map(|i| 0.1 * i as f64).collect(), Shape::Matrix(4, 2), true)
                .unwrap();
            let y = x.matmul(w).unwrap().sigmoid().softmax(1).unwrap().sum();
            let v = y.scalar_value().unwrap();
            let g = y.backward().unwrap();
            (v, g.get_or_zeros(x), g.get_or_zeros(w))
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn sigmoid_open_interval() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, &[-700.0, -10.0, 0.0, 10.0, 700.0]);
        for v in x.sigmoid().value() {
            assert!(v > 0.0 && v < 1.0 && v.is_finite());
        }
    }

    #[test]
    fn no_grad_through_constants() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, &[1.0, 2.0]);
        let c = tape.constant(vec![3.0, 4.0], Shape::Vector(2)).unwrap();
        let y = x.mul(c).unwrap().sum();
        let grads = y.backward().unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
    }
}
