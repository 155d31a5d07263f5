use std::fmt;

use super::kernels::{self, ConvDims, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation. Used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Softmax,
    Conv2d,
    Sum,
    Mean,
    Max,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Clamp,
    Concat,
    Slice,
    IndexSelect,
    Upsample,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "hadamard",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Softmax => "softmax",
            OpKind::Conv2d => "conv2d",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Clamp => "clamp",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::IndexSelect => "index_select",
            OpKind::Upsample => "upsample",
        }
    }

    pub const ALL: [OpKind; 25] = {
        use OpKind::*;
        [
            Leaf, MatMul, Transpose, Reshape, Add, Sub, Mul, Div, Scale, AddScalar, Softmax,
            Conv2d, Sum, Mean, Max, Relu, Sigmoid, Exp, Log, Sqrt, Clamp, Concat, Slice,
            IndexSelect, Upsample,
        ]
    };

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `(outer, axis_len, inner)` split of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `b_shape` broadcast to it. `None` when the shapes are identical.
fn broadcast_map(op: &'static str, out_shape: &[usize], b_shape: &[usize]) -> Result<Option<Vec<usize>>> {
    if out_shape == b_shape {
        return Ok(None);
    }
    let compatible = out_shape.len() == b_shape.len()
        && out_shape
            .iter()
            .zip(b_shape)
            .all(|(&o, &b)| b == o || b == 1);
    if !compatible {
        return Err(Error::shape(
            op,
            format!("{b_shape:?} is not broadcastable to {out_shape:?}"),
        ));
    }
    let rank = out_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { s };
        s *= b_shape[d];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= b_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, k: Var, dims: ConvDims },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Max { x: Var, axis: usize, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Upsample(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Max { .. } => OpKind::Max,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::Upsample(_) => OpKind::Upsample,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Upsample(x)
            | Op::Softmax { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Max { x, .. }
            | Op::Clamp { x, .. }
            | Op::Slice { x, .. }
            | Op::IndexSelect { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every op validates shapes up front and rejects non-finite results.
/// Calling [`Tape::backward`] replays the record in reverse and stores a
/// gradient for every node that depends on a `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all recorded nodes and gradients. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: multiply every gradient flowing back through ops of `kind` by 1.05.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Distinct op kinds recorded so far, in first-use order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut kinds = Vec::new();
        for n in &self.nodes {
            let k = n.op.kind();
            if k != OpKind::Leaf && !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        kinds
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape(), data)?;
        self.push(out, op)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2("matmul")?;
        let (n2, p) = tb.dims2("matmul")?;
        if n != n2 {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, n, p);
        self.push(Tensor::new(&[m, p], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.value(x).shape()),
            )
        })?;
        self.push(out, Op::Reshape(x))
    }

    // ---- elementwise with broadcasting of the right operand ----------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let map = broadcast_map(name, ta.shape(), tb.shape())?;
        let (ad, bd) = (ta.data(), tb.data());
        let data: Vec<f64> = match &map {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, op)
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product `a ⊙ b`, with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "hadamard", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map_unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---- axis ops -------------------------------------------------------

    /// Softmax along `axis`, stabilized by subtracting each slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        self.push(out, Op::Softmax { x, axis })
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let (shape, data) = match axis {
            None => {
                let s = t.sum();
                let v = if mean { s / t.numel() as f64 } else { s };
                (vec![1], vec![v])
            }
            Some(axis) => {
                check_axis(if mean { "mean" } else { "sum" }, t.shape(), axis)?;
                let (outer, len, inner) = split_axis(t.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += t.data()[(o * len + j) * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                (shape, out)
            }
        };
        let out = Tensor::new(&shape, data)?;
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        self.push(out, op)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    /// Maximum along `axis` (removed from the shape) and the winning position
    /// along that axis for every output element. Ties go to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let t = self.value(x);
        check_axis("max", t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut vals = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let v = t.data()[(o * len + j) * inner + i];
                    let k = o * inner + i;
                    if v > vals[k] {
                        vals[k] = v;
                        arg[k] = j;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, vals)?;
        let v = self.push(
            out,
            Op::Max {
                x,
                axis,
                argmax: arg.clone(),
            },
        )?;
        Ok((v, arg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if start >= end || end > len {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} invalid for axis of length {len}"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = w;
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Slice { x, axis, start })
    }

    /// Gather positions `indices` along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check_axis("index_select", t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if indices.is_empty() {
            return Err(Error::shape("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range for axis of length {len}"),
            ));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                out.extend_from_slice(&t.data()[(o * len + j) * inner..(o * len + j + 1) * inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let out = Tensor::new(&shape, out)?;
        self.push(
            out,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    // ---- spatial -------------------------------------------------------

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let dims = ConvDims::new(tx.shape(), tk.shape(), geom)?;
        let out = kernels::conv2d_forward(tx.data(), tk.data(), &dims);
        let out = Tensor::new(&[dims.c_out, dims.h_out, dims.w_out], out)?;
        self.push(out, Op::Conv2d { x, k, dims })
    }

    /// Nearest-neighbour 2× upsampling of a `C×H×W` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3("upsample")?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = t.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[c, h2, w2], out)?;
        self.push(out, Op::Upsample(x))
    }

    // ---- reverse pass --------------------------------------------------

    /// Populate gradients of the scalar `loss` for every node that requires one.
    /// Contributions from multiple uses of a value accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.05);
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Accumulator for input `v`, allocated on first use; None if `v` needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let p = tb.shape()[1];
                if let Some(da) = acc!(*a) {
                    kernels::matmul_bt_acc(g, tb.data(), da, m, n, p);
                }
                if let Some(db) = acc!(*b) {
                    kernels::matmul_at_acc(ta.data(), g, db, m, n, p);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                if let Some(dx) = acc!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::AddScalar(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let map = broadcast_map("backward", ta.shape(), tb.shape()).expect("checked in forward");
                let bidx = |k: usize| map.as_ref().map_or(k, |m| m[k]);
                let (ad, bd) = (ta.data(), tb.data());
                let kind = node.op.kind();
                if let Some(da) = acc!(*a) {
                    for k in 0..g.len() {
                        da[k] += match kind {
                            OpKind::Add | OpKind::Sub => g[k],
                            OpKind::Mul => g[k] * bd[bidx(k)],
                            _ => g[k] / bd[bidx(k)],
                        };
                    }
                }
                if let Some(db) = acc!(*b) {
                    for k in 0..g.len() {
                        let j = bidx(k);
                        db[j] += match kind {
                            OpKind::Add => g[k],
                            OpKind::Sub => -g[k],
                            OpKind::Mul => g[k] * ad[k],
                            _ => -g[k] * ad[k] / (bd[j] * bd[j]),
                        };
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = acc!(*x) {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, dims } => {
                let (tx, tk) = (self.value(*x), self.value(*k));
                let want_x = self.nodes[x.0].requires_grad;
                let want_k = self.nodes[k.0].requires_grad;
                let mut dx_buf = want_x.then(|| vec![0.0; tx.numel()]);
                let mut dk_buf = want_k.then(|| vec![0.0; tk.numel()]);
                kernels::conv2d_backward(
                    tx.data(),
                    tk.data(),
                    g,
                    dims,
                    dx_buf.as_deref_mut(),
                    dk_buf.as_deref_mut(),
                );
                if let (Some(buf), Some(dx)) = (dx_buf, acc!(*x)) {
                    dx.iter_mut().zip(buf).for_each(|(d, v)| *d += v);
                }
                if let (Some(buf), Some(dk)) = (dk_buf, acc!(*k)) {
                    dk.iter_mut().zip(buf).for_each(|(d, v)| *d += v);
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let in_shape = self.value(*x).shape().to_vec();
                if let Some(dx) = acc!(*x) {
                    match axis {
                        None => {
                            let s = if is_mean { g[0] / dx.len() as f64 } else { g[0] };
                            dx.iter_mut().for_each(|d| *d += s);
                        }
                        Some(axis) => {
                            let (outer, len, inner) = split_axis(&in_shape, *axis);
                            let f = if is_mean { 1.0 / len as f64 } else { 1.0 };
                            for o in 0..outer {
                                for j in 0..len {
                                    for ii in 0..inner {
                                        dx[(o * len + j) * inner + ii] += f * g[o * inner + ii];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Max { x, axis, argmax } => {
                let in_shape = self.value(*x).shape().to_vec();
                if let Some(dx) = acc!(*x) {
                    let (outer, len, inner) = split_axis(&in_shape, *axis);
                    for o in 0..outer {
                        for ii in 0..inner {
                            let k = o * inner + ii;
                            dx[(o * len + argmax[k]) * inner + ii] += g[k];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let y = out.data();
                if let Some(dx) = acc!(*x) {
                    for k in 0..g.len() {
                        if y[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                if let Some(dx) = acc!(*x) {
                    for k in 0..g.len() {
                        dx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Exp(x) => {
                let y = out.data();
                if let Some(dx) = acc!(*x) {
                    for k in 0..g.len() {
                        dx[k] += g[k] * y[k];
                    }
                }
            }
            Op::Log(x) => {
                let xin = self.value(*x).data();
                if let Some(dx) = acc!(*x) {
                    for k in 0..g.len() {
                        dx[k] += g[k] / xin[k];
                    }
                }
            }
            Op::Sqrt(x) => {
                let y = out.data();
                if let Some(dx) = acc!(*x) {
                    for k in 0..g.len() {
                        dx[k] += g[k] * 0.5 / y[k];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xin = self.value(*x).data();
                if let Some(dx) = acc!(*x) {
                    for k in 0..g.len() {
                        if xin[k] >= *lo && xin[k] <= *hi {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).shape()[*axis];
                    if let Some(dx) = acc!(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.value(*x).shape().to_vec();
                if let Some(dx) = acc!(*x) {
                    let (outer, len, inner) = split_axis(&in_shape, *axis);
                    let w = out.shape()[*axis];
                    for o in 0..outer {
                        let src = &g[o * w * inner..(o + 1) * w * inner];
                        let dst = &mut dx[(o * len + start) * inner..(o * len + start + w) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let in_shape = self.value(*x).shape().to_vec();
                if let Some(dx) = acc!(*x) {
                    let (outer, len, inner) = split_axis(&in_shape, *axis);
                    let n = indices.len();
                    for o in 0..outer {
                        for (p, &j) in indices.iter().enumerate() {
                            let src = &g[(o * n + p) * inner..(o * n + p + 1) * inner];
                            let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::Upsample(x) => {
                let (c, h, w) = (out.shape()[0], out.shape()[1] / 2, out.shape()[2] / 2);
                if let Some(dx) = acc!(*x) {
                    let (h2, w2) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::eye(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn softmax_of_zero_and_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let y = tape.value(y).data();
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_constant_slice_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 5], 7.5));
        let y = tape.softmax(x, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1000.0, 1001.0, 999.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_of_ones_and_relu() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3]));
        let s = tape.sum_all(x).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
        let n = tape.scale(x, -3.0).unwrap();
        let r = tape.relu(n).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_matches_copy() {
        let mut tape = Tape::new();
        let a_data: Vec<f64> = (0..6).map(f64::from).collect();
        let b_data: Vec<f64> = (100..110).map(f64::from).collect();
        let a = tape.constant(t(&[2, 3], &a_data));
        let b = tape.constant(t(&[2, 5], &b_data));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
        let mut expected = Vec::new();
        for r in 0..2 {
            expected.extend_from_slice(&a_data[r * 3..r * 3 + 3]);
            expected.extend_from_slice(&b_data[r * 5..r * 5 + 5]);
        }
        assert_eq!(tape.value(c).data(), &expected[..]);
    }

    #[test]
    fn max_ties_pick_first_index() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 3], &[2.0, 5.0, 5.0]));
        let (m, arg) = tape.max_axis(x, 1).unwrap();
        assert_eq!(arg, vec![1]);
        let s = tape.sum_all(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(exp(x)) + sum(3x): df/dx = exp(x) + 3
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.0, 1.0]));
        let e = tape.exp(x).unwrap();
        let se = tape.sum_all(e).unwrap();
        let l = tape.scale(x, 3.0).unwrap();
        let sl = tape.sum_all(l).unwrap();
        let f = tape.add(se, sl).unwrap();
        tape.backward(f).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert!((g[0] - 4.0).abs() < 1e-15);
        assert!((g[1] - (1f64.exp() + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[4, 3]));
        let ok = tape.constant(Tensor::ones(&[4, 1]));
        let bad = tape.constant(Tensor::ones(&[3, 4]));
        assert!(tape.mul(a, ok).is_ok());
        assert!(tape.mul(a, bad).is_err());
    }
}
