//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value. A node is
//! *recorded* (keeps its op and backward rule) only when at least one input
//! requires gradients; otherwise it is stored as a constant.
//!
//! Shape rules:
//! - elementwise binary ops: shapes are equal, or the right operand's shape is
//!   a trailing suffix of the left operand's shape and is repeated over the
//!   leading axes. No other broadcasting is accepted.
//! - `matmul`: `[.., m, k] x [k, n]` (shared right operand) or
//!   `[.., m, k] x [.., k, n]` with identical leading extents.
//! - `affine`: `[.., in] x [in, out] + [out]`.
//! - `conv1d`: channels-last input `[B, L, C_in]`, kernel `[K, C_in, C_out]`,
//!   bias `[C_out]`. Causal padding prepends `(K-1)*dilation` zeros; `None`
//!   padding drops any remainder that does not fill a whole kernel span.
//! - `masked_softmax`: input `[.., L, M]`, mask `[L, M]` shared across the
//!   leading axes; masked entries get exactly zero weight.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{axis_split, strides, Tensor};
use crate::error::{shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Left zero padding so that output step `t` only sees inputs `<= t`.
    Causal,
    /// No padding; trailing steps that do not fill a kernel span are dropped.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn causal(dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: Padding::Causal,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            padding: Padding::Valid,
        }
    }

    fn left_pad(&self, kernel: usize) -> usize {
        match self.padding {
            Padding::Causal => (kernel - 1) * self.dilation,
            Padding::Valid => 0,
        }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = (kernel - 1) * self.dilation + 1;
        let padded = len + self.left_pad(kernel);
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Operation kinds with their attributes, for generic dispatch via
/// [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    Affine,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Softmax { axis: usize },
    MaskedSoftmax { mask: Rc<Vec<bool>> },
    LayerNorm,
    Sum,
    Mean,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Embedding { ids: Vec<usize> },
    Dropout { rate: f64 },
    Conv1d(ConvSpec),
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Embedding(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Conv1d(Var, Var, Var, ConvSpec),
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(a, b, c) | Op::Conv1d(a, b, c, _) => vec![*a, *b, *c],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(vs, _) => vs.clone(),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a, _)
            | Op::MaskedSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Slice(a, _, _)
            | Op::Embedding(a, _)
            | Op::Dropout(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of recorded nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// A single-threaded computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Graph {
    /// `training` enables dropout; `seed` drives the dropout stream.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `f64` values held by the tape.
    pub fn footprint(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    /// Nodes that carry a backward rule.
    pub fn recorded(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter as a gradient-requiring leaf. Repeated calls
    /// with the same name return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Generic entry point: applies `kind` to `inputs`.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::Scale(c) => arity(1).map(|_| self.scale(inputs[0], *c)),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Affine => arity(3).and_then(|_| self.affine(inputs[0], inputs[1], inputs[2])),
            OpKind::Relu => arity(1).map(|_| self.relu(inputs[0])),
            OpKind::Gelu => arity(1).map(|_| self.gelu(inputs[0])),
            OpKind::Sigmoid => arity(1).map(|_| self.sigmoid(inputs[0])),
            OpKind::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            OpKind::Softmax { axis } => arity(1).and_then(|_| self.softmax(inputs[0], *axis)),
            OpKind::MaskedSoftmax { mask } => arity(1).and_then(|_| self.masked_softmax(inputs[0], mask.clone())),
            OpKind::LayerNorm => arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2])),
            OpKind::Sum => arity(1).map(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1).map(|_| self.mean(inputs[0])),
            OpKind::SumAxis { axis } => arity(1).and_then(|_| self.sum_axis(inputs[0], *axis)),
            OpKind::MeanAxis { axis } => arity(1).and_then(|_| self.mean_axis(inputs[0], *axis)),
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, end } => arity(1).and_then(|_| self.slice(inputs[0], *axis, *start, *end)),
            OpKind::Embedding { ids } => arity(1).and_then(|_| self.embedding(inputs[0], ids)),
            OpKind::Dropout { rate } => arity(1).map(|_| self.dropout(inputs[0], *rate)),
            OpKind::Conv1d(spec) => arity(3).and_then(|_| self.conv1d(inputs[0], inputs[1], inputs[2], *spec)),
            OpKind::Reshape { shape } => arity(1).and_then(|_| self.reshape(inputs[0], shape)),
            OpKind::Permute { perm } => arity(1).and_then(|_| self.permute(inputs[0], perm)),
        }
    }

    // ---- elementwise binary -------------------------------------------------

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(shape_err(
                op,
                format!("right operand {sb:?} is not a trailing suffix of {sa:?}"),
            ))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let nb = vb.len();
        let data = va.data().iter().enumerate().map(|(i, x)| f(*x, vb[i % nb])).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, c))
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, shared) = matmul_dims(&sa, &sb)?;
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for p in 0..batch {
            let bo = if shared { 0 } else { p * k * n };
            gemm(
                &da[p * m * k..(p + 1) * m * k],
                &db[bo..bo + k * n],
                &mut out[p * m * n..(p + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let inp = *sx
            .last()
            .ok_or_else(|| shape_err("affine", "input must have rank >= 1"))?;
        if sw.len() != 2 || sw[0] != inp || sb != [sw[1]] {
            return Err(shape_err("affine", format!("input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let out_dim = sw[1];
        let rows = self.value(x).numel() / inp;
        let mut out = Vec::with_capacity(rows * out_dim);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(self.value(x).data(), self.value(w).data(), &mut out, rows, inp, out_dim);
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(out_dim);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine(x, w, b)))
    }

    // ---- activations --------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    /// Softmax over the last axis restricted to `mask` (`true` = allowed).
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("masked_softmax", format!("rank < 2: {shape:?}")));
        }
        let (l, m) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if mask.len() != l * m {
            return Err(shape_err(
                "masked_softmax",
                format!("mask has {} entries, scores end in [{l}, {m}]", mask.len()),
            ));
        }
        if let Some(row) = (0..l).find(|r| !mask[r * m..(r + 1) * m].iter().any(|x| *x)) {
            return Err(shape_err("masked_softmax", format!("mask row {row} allows no entries")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for (r, (row_in, row_out)) in src.chunks(m).zip(out.chunks_mut(m)).enumerate() {
            let mrow = &mask[(r % l) * m..(r % l + 1) * m];
            let max = row_in
                .iter()
                .zip(mrow)
                .filter(|(_, ok)| **ok)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                if mrow[j] {
                    let e = (row_in[j] - max).exp();
                    row_out[j] = e;
                    z += e;
                }
            }
            for y in row_out.iter_mut() {
                *y /= z;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaskedSoftmax(a)))
    }

    /// Layer normalization over the last axis with elementwise affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "input must have rank >= 1"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / d.max(1));
        let mut out = vec![0.0; src.len()];
        for (r, row) in src.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("reduce", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        Ok(self.push(value, op))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Slice(a, axis, start)))
    }

    /// Row lookup: `table [V, d]`, output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-D, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|i| **i >= rows) {
            return Err(Error::UnknownSeries { id: *bad, n: rows });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::Embedding(table, ids.to_vec())))
    }

    /// Inverted dropout; the identity in evaluation mode or for `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout(a, mask))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sb != [sw[2]] {
            return Err(shape_err("conv1d", format!("input {sx:?}, kernel {sw:?}, bias {sb:?}")));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(shape_err("conv1d", "stride and dilation must be >= 1"));
        }
        let (batch, len, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let lout = spec
            .output_len(len, k)
            .ok_or_else(|| shape_err("conv1d", format!("input length {len} shorter than kernel span of {k}")))?;
        let pad = spec.left_pad(k);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * lout * cout);
        for bi in 0..batch {
            for t in 0..lout {
                let base = out.len();
                out.extend_from_slice(bd);
                let acc = &mut out[base..base + cout];
                for j in 0..k {
                    let pos = (t * spec.stride + j * spec.dilation) as isize - pad as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let xrow = &xd[(bi * len + pos as usize) * cin..][..cin];
                    for (ci, xv) in xrow.iter().enumerate() {
                        let wrow = &wd[(j * cin + ci) * cout..][..cout];
                        for (o, wv) in acc.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, lout, cout], out)?;
        Ok(self.push(value, Op::Conv1d(x, w, b, spec)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|p| *p < seen.len() && !std::mem::replace(&mut seen[*p], true));
        if !valid {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let out = permute_data(self.value(a).data(), &shape, perm);
        let new_shape: Vec<usize> = perm.iter().map(|p| shape[*p]).collect();
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec())))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let nb = val(*b).len();
                acc(*b, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                acc(*a, &mut |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * vb[i % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                acc(*a, &mut |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y / vb[i % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        let d = vb[i % nb];
                        gb[i % nb] -= y * va[i] / (d * d);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shape(*a), shape(*b));
                let (batch, m, k, n, shared) = matmul_dims(sa, sb).expect("checked in forward");
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for p in 0..batch {
                        let bo = if shared { 0 } else { p * k * n };
                        gemm_a_bt(
                            &g[p * m * n..(p + 1) * m * n],
                            &vb[bo..bo + k * n],
                            &mut ga[p * m * k..(p + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for p in 0..batch {
                        let bo = if shared { 0 } else { p * k * n };
                        gemm_at_b(
                            &va[p * m * k..(p + 1) * m * k],
                            &g[p * m * n..(p + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Affine(x, w, b) => {
                let sw = shape(*w);
                let (inp, outd) = (sw[0], sw[1]);
                let rows = g.len() / outd;
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |gx| gemm_a_bt(g, vw, gx, rows, outd, inp));
                acc(*w, &mut |gw| gemm_at_b(vx, g, gw, rows, inp, outd));
                acc(*b, &mut |gb| {
                    for row in g.chunks(outd) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        let x = va[i];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                ga[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let m = *node.value.shape().last().expect("rank >= 2");
                acc(*a, &mut |ga| {
                    for ((gr, yr), dst) in g.chunks(m).zip(out.chunks(m)).zip(ga.chunks_mut(m)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..m {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                let d = gm.len();
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            gx[r * d + j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = axis_split(shape(*a), *axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += c * y);
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = shape(*p)[*axis];
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut gp[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, len, inner) = axis_split(shape(*a), *axis);
                let width = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let src = &g[o * width * inner..][..width * inner];
                        let dst = &mut ga[(o * len + start) * inner..][..width * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let d = shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Conv1d(x, w, b, spec) => {
                let (sx, sw) = (shape(*x), shape(*w));
                let (batch, len, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let lout = node.value.shape()[1];
                let pad = spec.left_pad(k);
                let (vx, vw) = (val(*x), val(*w));
                let taps = |bi: usize, t: usize| {
                    (0..k).filter_map(move |j| {
                        let pos = (t * spec.stride + j * spec.dilation) as isize - pad as isize;
                        (pos >= 0 && (pos as usize) < len).then(|| (j, bi * len + pos as usize))
                    })
                };
                acc(*x, &mut |gx| {
                    for bi in 0..batch {
                        for t in 0..lout {
                            let grow = &g[(bi * lout + t) * cout..][..cout];
                            for (j, row) in taps(bi, t) {
                                for ci in 0..cin {
                                    let wrow = &vw[(j * cin + ci) * cout..][..cout];
                                    gx[row * cin + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for bi in 0..batch {
                        for t in 0..lout {
                            let grow = &g[(bi * lout + t) * cout..][..cout];
                            for (j, row) in taps(bi, t) {
                                for ci in 0..cin {
                                    let xv = vx[row * cin + ci];
                                    let dst = &mut gw[(j * cin + ci) * cout..][..cout];
                                    dst.iter_mut().zip(grow).for_each(|(d, y)| *d += xv * y);
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, p) in perm.iter().enumerate() {
                    inverse[*p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let bad = || shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
    if sa.len() < 2 || sb.len() < 2 {
        return Err(bad());
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return Err(bad());
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    if sb.len() == 2 {
        Ok((batch, m, k, n, true))
    } else if sb.len() == sa.len() && sb[..sb.len() - 2] == sa[..sa.len() - 2] {
        Ok((batch, m, k, n, false))
    } else {
        Err(bad())
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every row-major index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    // SAFETY: as above, with b read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as above, with a read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|p| shape[*p]).collect();
    let step: Vec<usize> = perm.iter().map(|p| in_strides[*p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += step[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new(false, 0);
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, -1.0, 0.5, 7.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new(false, 0);
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn causal_conv_with_ones_kernel_is_running_window_sum() {
        let mut g = Graph::new(false, 0);
        let x = g.constant(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, ConvSpec::causal(1)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 6.0, 9.0]);
    }

    #[test]
    fn strided_conv_drops_remainder() {
        let spec = ConvSpec::strided(8);
        assert_eq!(spec.output_len(96, 16), Some(11));
        assert_eq!(spec.output_len(10, 16), None);
        assert_eq!(ConvSpec::strided(96).output_len(96, 96), Some(1));
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new(false, 0);
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut g = Graph::new(false, 0);
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new(false, 0);
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.relu(a);
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_extents() {
        let mut g = Graph::new(false, 0);
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[2, 3]"), "{err}");
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new(false, 0);
        let a = g.constant(Tensor::zeros(vec![3]));
        let b = g.relu(a);
        assert!(!g.requires_grad(b));
        assert_eq!(g.recorded(), 0);
    }

    #[test]
    fn shared_node_gradients_accumulate_and_each_node_runs_once() {
        let mut g = Graph::new(false, 0);
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.tanh(x);
        let z = g.add(y, y).unwrap();
        let w = g.mul(z, y).unwrap();
        let grads = g.backward(w).unwrap();
        // w = 2 tanh(x)^2, dw/dx = 4 tanh(x) (1 - tanh(x)^2)
        let th = 2f64.tanh();
        let expect = 4.0 * th * (1.0 - th * th);
        assert!((grads.get(x).unwrap().item() - expect).abs() < 1e-12);
        assert_eq!(grads.visited(), g.recorded());
        assert_eq!(grads.visited(), 3);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new(false, 0);
        let a = g.leaf(Tensor::full(vec![10], 1.0), true);
        let d = g.dropout(a, 0.5);
        assert_eq!(d, a);
    }

    #[test]
    fn dropout_stream_is_seeded() {
        let run = |seed| {
            let mut g = Graph::new(true, seed);
            let a = g.leaf(Tensor::full(vec![64], 1.0), true);
            let d = g.dropout(a, 0.5);
            g.value(d).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn masked_softmax_gives_exact_zeros() {
        let mut g = Graph::new(false, 0);
        let x = g.constant(t(&[2, 2], &[1.0, 5.0, 2.0, 3.0]));
        let mask = Rc::new(vec![true, false, true, true]);
        let y = g.masked_softmax(x, mask).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let shape = [2, 3, 4];
        let p = permute_data(&data, &shape, &[2, 0, 1]);
        let back = permute_data(&p, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(back, data);
        // element [1, 2, 3] of the input lands at [3, 1, 2]
        assert_eq!(p[3 * 6 + 3 + 2], data[12 + 2 * 4 + 3]);
    }
}
