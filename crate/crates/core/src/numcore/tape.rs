//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends a node holding its output value. Nodes only ever refer to
//! earlier nodes, so the record is already in topological order and the
//! backward sweep is a single reverse pass.

use std::collections::HashMap;

use rand::Rng;

use super::param::{Param, ParamId};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    LeakyRelu(f64),
    Square,
    Sqrt,
    Abs,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
            Unary::Recip => "recip",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Recip => 1.0 / x,
        }
    }

    /// Derivative given input `x` and output `y`. Kinks get subgradient 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    s
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Recip => -y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Flat input index for every output element; `None` means identity.
type IndexMap = Option<Vec<usize>>;

enum Op {
    Leaf,
    Const,
    Unary(Unary, Var),
    Binary(Binary, Var, Var, IndexMap, IndexMap),
    Affine(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Broadcast { x: Var, map: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    PermuteLast { x: Var, perm: Vec<usize> },
    Cumsum(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Where { cond: Vec<bool>, a: Var, b: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::Binary(_, a, b, _, _) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Where { a, b, .. } => vec![*a, *b],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Unary(_, x)
            | Op::Affine(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Cumsum(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Slice { x, .. }
            | Op::Pick { x, .. }
            | Op::PermuteLast { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Clamp { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded computation. Build it during a forward pass, then consume it
/// with [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: &Param) -> Option<&Tensor> {
        self.by_param.get(&param.id())
    }

    pub fn get_id(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn get_id_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.by_param.get_mut(&id)
    }

    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.by_param.keys()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// For each element of `out_shape`, the flat index of the broadcast source in
/// `in_shape` (right-aligned, size-1 axes repeat).
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
            });
        }
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input; its gradient is available through [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Const, "constant")
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a parameter. Repeated calls within one tape return the same leaf.
    pub fn param(&mut self, p: &Param) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&p.id()) {
            return Ok(v);
        }
        let v = self.push(p.value.clone(), Op::Leaf, &p.name)?;
        self.param_vars.insert(p.id(), v);
        Ok(v)
    }

    // ---------------------------------------------------------------- unary

    pub fn unary(&mut self, f: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f.apply(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Unary(f, x), f.name())
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Recip, x)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Affine(x, scale), "affine")
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, 1.0, c)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Clamp { x, lo, hi }, "clamp")
    }

    // --------------------------------------------------------------- binary

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let map_a = (sa != out_shape).then(|| broadcast_map(&sa, &out_shape));
        let map_b = (sb != out_shape).then(|| broadcast_map(&sb, &out_shape));
        let av = self.data(a);
        let bv = self.data(b);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let n = numel(&out_shape);
        let data: Vec<f64> = match (&map_a, &map_b) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = map_a.as_ref().map_or(i, |m| m[i]);
                    let ib = map_b.as_ref().map_or(i, |m| m[i]);
                    f(av[ia], bv[ib])
                })
                .collect(),
        };
        let out = Tensor::from_parts(out_shape, data);
        self.push(out, Op::Binary(kind, a, b, map_a, map_b), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        self.push(out, Op::Reshape(x), "reshape")
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean of empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "sum_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::SumAxis { x, axis },
            "sum_axis",
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).unwrap_or(&1);
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(s, 1.0 / len.max(1) as f64)
    }

    // ------------------------------------------------------- restructuring

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        match broadcast_shape(&s, shape) {
            Some(ref out) if out.as_slice() == shape => {}
            _ => {
                return Err(Error::Shape {
                    op: "broadcast",
                    lhs: s,
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = broadcast_map(&s, shape);
        let xv = self.data(x);
        let data = map.iter().map(|&i| xv[i]).collect();
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Broadcast { x, map },
            "broadcast",
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let src = self.data(*p);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, end],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let width = end - start;
        let xv = self.data(x);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xv[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice { x, axis, start },
            "slice",
        )
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, start + s)?);
            start += s;
        }
        if Some(&start) != self.shape(x).get(axis) {
            return Err(Error::Shape {
                op: "split",
                lhs: self.shape(x).to_vec(),
                rhs: sizes.to_vec(),
            });
        }
        Ok(out)
    }

    /// Reorder the last axis: `out[.., j] = x[.., perm[j]]`.
    pub fn permute_last(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = last_dim(&shape);
        if perm.len() != k || perm.iter().any(|&p| p >= k) {
            return Err(Error::Shape {
                op: "permute_last",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let xv = self.data(x);
        let rows = xv.len() / k.max(1);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            out.extend(perm.iter().map(|&p| xv[r * k + p]));
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::PermuteLast {
                x,
                perm: perm.to_vec(),
            },
            "permute_last",
        )
    }

    // --------------------------------------------------- last-axis kernels

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = last_dim(&shape);
        let xv = self.data(x);
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(k).zip(out.chunks_mut(k)) {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = last_dim(&shape);
        let xv = self.data(x);
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(k).zip(out.chunks_mut(k)) {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), "log_softmax")
    }

    /// Inclusive running sum along the last axis.
    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = last_dim(&shape);
        let xv = self.data(x);
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(k).zip(out.chunks_mut(k)) {
            let mut acc = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                acc += s;
                *d = acc;
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Cumsum(x), "cumsum")
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = last_dim(&shape);
        let xv = self.data(x);
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / k.max(1));
        for (src, dst) in xv.chunks(k).zip(out.chunks_mut(k)) {
            let mean = src.iter().sum::<f64>() / k as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, inv_std },
            "layer_norm",
        )
    }

    /// Rows of a `[V, e]` table; the result has shape `[ids.len(), e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (v, e) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for vocabulary of {v}"
            )));
        }
        let tv = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), e], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// One element per last-axis row: `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = last_dim(&shape);
        let rows = numel(&shape) / k.max(1);
        if idx.len() != rows || idx.iter().any(|&i| i >= k) {
            return Err(Error::Shape {
                op: "pick",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        let xv = self.data(x);
        let out = idx.iter().enumerate().map(|(r, &i)| xv[r * k + i]).collect();
        let mut out_shape = shape;
        out_shape.pop();
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            "pick",
        )
    }

    /// Elementwise selection; gradients flow only to the chosen branch.
    pub fn where_(&mut self, cond: &[bool], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || cond.len() != numel(&sa) {
            return Err(Error::Shape {
                op: "where",
                lhs: sa,
                rhs: sb,
            });
        }
        let (av, bv) = (self.data(a), self.data(b));
        let out = cond
            .iter()
            .zip(av.iter().zip(bv))
            .map(|(&c, (&x, &y))| if c { x } else { y })
            .collect();
        self.push(
            Tensor::from_parts(sa, out),
            Op::Where {
                cond: cond.to_vec(),
                a,
                b,
            },
            "where",
        )
    }

    /// Inverted dropout. Identity when `p == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!("dropout probability {p} >= 1")));
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let mask = (0..numel(&shape))
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask))?;
        self.mul(x, m)
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Const) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        let by_var: HashMap<Var, ParamId> = self.param_vars.iter().map(|(k, v)| (*v, *k)).collect();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
            match by_var.get(&Var(i)) {
                Some(id) => {
                    out.by_param.insert(*id, t);
                }
                None => {
                    out.by_leaf.insert(Var(i), t);
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let size = |v: Var| self.nodes[v.0].value.numel();
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Unary(f, x) => {
                let xv = self.data(*x);
                let yv = node.value.data();
                let dst = slot(grads, *x, xv.len());
                for i in 0..g.len() {
                    dst[i] += g[i] * f.derivative(xv[i], yv[i]);
                }
            }
            Op::Affine(x, scale) => {
                let dst = slot(grads, *x, g.len());
                for (d, gi) in dst.iter_mut().zip(g) {
                    *d += gi * scale;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                let dst = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        dst[i] += g[i];
                    }
                }
            }
            Op::Binary(kind, a, b, map_a, map_b) => {
                let (a, b) = (*a, *b);
                let av = self.data(a);
                let bv = self.data(b);
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                if rg(a) {
                    let dst = slot(grads, a, av.len());
                    for i in 0..g.len() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bv[ib(i)],
                            Binary::Div => g[i] / bv[ib(i)],
                        };
                        dst[ia(i)] += d;
                    }
                }
                if rg(b) {
                    let dst = slot(grads, b, bv.len());
                    for i in 0..g.len() {
                        let d = match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av[ia(i)],
                            Binary::Div => {
                                let y = bv[ib(i)];
                                -g[i] * av[ia(i)] / (y * y)
                            }
                        };
                        dst[ib(i)] += d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let bv = self.data(*b);
                    matmul_bt_acc(g, bv, slot(grads, *a, m * k), m, k, n);
                }
                if rg(*b) {
                    let av = self.data(*a);
                    matmul_at_acc(av, g, slot(grads, *b, k * n), m, k, n);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let dst = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => {
                let dst = slot(grads, *x, g.len());
                for (d, gi) in dst.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Sum(x) => {
                let n = size(*x);
                let dst = slot(grads, *x, n);
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let dst = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dst[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Broadcast { x, map } => {
                let dst = slot(grads, *x, size(*x));
                for (i, &src) in map.iter().enumerate() {
                    dst[src] += g[i];
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if rg(*p) {
                        let dst = slot(grads, *p, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in dst[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let width = node.value.shape()[*axis];
                let dst = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    for (d, s) in dst[base..base + width * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::PermuteLast { x, perm } => {
                let k = perm.len();
                let dst = slot(grads, *x, g.len());
                for (r, grow) in g.chunks(k).enumerate() {
                    for (j, &p) in perm.iter().enumerate() {
                        dst[r * k + p] += grow[j];
                    }
                }
            }
            Op::Softmax(x) => {
                let k = last_dim(node.value.shape());
                let y = node.value.data();
                let dst = slot(grads, *x, y.len());
                for r in 0..y.len() / k {
                    let yr = &y[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dst[r * k + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let k = last_dim(node.value.shape());
                let y = node.value.data();
                let dst = slot(grads, *x, y.len());
                for r in 0..y.len() / k {
                    let yr = &y[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..k {
                        dst[r * k + j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            }
            Op::Cumsum(x) => {
                let k = last_dim(node.value.shape());
                let dst = slot(grads, *x, g.len());
                for (grow, drow) in g.chunks(k).zip(dst.chunks_mut(k)) {
                    let mut acc = 0.0;
                    for j in (0..k).rev() {
                        acc += grow[j];
                        drow[j] += acc;
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let k = last_dim(node.value.shape());
                let y = node.value.data();
                let dst = slot(grads, *x, y.len());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let yr = &y[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let mg = gr.iter().sum::<f64>() / k as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                    for j in 0..k {
                        dst[r * k + j] += inv * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let e = self.shape(*table)[1];
                let dst = slot(grads, *table, size(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dst[id * e + j] += g[r * e + j];
                    }
                }
            }
            Op::Pick { x, idx } => {
                let k = last_dim(self.shape(*x));
                let dst = slot(grads, *x, size(*x));
                for (r, &i) in idx.iter().enumerate() {
                    dst[r * k + i] += g[r];
                }
            }
            Op::Where { cond, a, b } => {
                if rg(*a) {
                    let dst = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if cond[i] {
                            dst[i] += g[i];
                        }
                    }
                }
                if rg(*b) {
                    let dst = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        if !cond[i] {
                            dst[i] += g[i];
                        }
                    }
                }
            }
        }
    }
}
