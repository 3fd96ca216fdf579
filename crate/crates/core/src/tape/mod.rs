//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every forward op in insertion order together with
//! whatever activations its vector-Jacobian product needs. [`Tape::backward`]
//! walks the nodes in strict reverse order, once each. Every forward op checks
//! its output for NaN/Inf and fails with [`Error::NonFinite`].
//!
//! Layout conventions: matrices are `[rows, cols]`; 1-D convolution and
//! pooling take channels-last `[batch, length, channels]` input.

mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use kernels::{col2im, im2col, ConvDims};
pub(crate) use kernels::{gemm, MatRef};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Atanh(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Softmax(Var),
    Sum {
        input: Var,
        axis: Option<usize>,
    },
    Mean {
        input: Var,
        axis: Option<usize>,
    },
    L2Norm(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Moves the gradient of `v` out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Per-output-dimension element strides of an operand broadcast to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast iteration space.
fn broadcast_for_each(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    let total = numel(out);
    let mut idx = vec![0; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation (data, masks, frozen values).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite {
                context: "leaf tensor".into(),
            });
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} (tape node {})", self.nodes.len()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (name, op) = match kind {
            Binary::Add => ("add", Op::Add(a, b)),
            Binary::Sub => ("sub", Op::Sub(a, b)),
            Binary::Mul => ("mul", Op::Mul(a, b)),
            Binary::Div => ("div", Op::Div(a, b)),
        };
        let ta = self.value(a);
        let tb = self.value(b);
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Shape {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let (xa, xb) = (ta.data(), tb.data());
        let mut out = vec![0.0; numel(&out_shape)];
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        if ta.shape() == tb.shape() {
            for (o, (&x, &y)) in out.iter_mut().zip(xa.iter().zip(xb)) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            broadcast_for_each(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(xa[ia], xb[ib]));
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(name, value, op, &[a, b])
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, Op::Offset(x), |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    /// Inverse hyperbolic tangent; arguments outside (-1, 1) fail as non-finite.
    pub fn atanh(&mut self, x: Var) -> Result<Var> {
        self.unary("atanh", x, Op::Atanh(x), f64::atanh)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, Op::Softplus(x), softplus)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Usage(format!("clamp bounds reversed: {lo} > {hi}")));
        }
        self.unary("clamp", x, Op::Clamp { input: x, lo, hi }, |v| {
            v.clamp(lo, hi)
        })
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.clamp(x, lo, f64::INFINITY)
    }

    pub fn clamp_max(&mut self, x: Var, hi: f64) -> Result<Var> {
        self.clamp(x, f64::NEG_INFINITY, hi)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(ta.data(), k),
            MatRef::row_major(tb.data(), n),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Stride-1 convolution with "same" zero padding.
    ///
    /// `input: [batch, len, c_in]`, `weight: [c_out, c_in, kernel]` (odd
    /// kernel), `bias: [c_out]`; output `[batch, len, c_out]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 3 || sw.len() != 3 || sw[1] != si[2] || sw[2] % 2 == 0 {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: si,
                rhs: sw,
            });
        }
        if sb != [sw[0]] {
            return Err(Error::Shape {
                op: "conv1d bias",
                lhs: sb,
                rhs: vec![sw[0]],
            });
        }
        let dims = ConvDims {
            batch: si[0],
            len: si[1],
            c_in: si[2],
            c_out: sw[0],
            kernel: sw[2],
        };
        let cols = im2col(self.value(input).data(), dims);
        let rows = dims.batch * dims.len;
        let mut out = vec![0.0; rows * dims.c_out];
        gemm(
            rows,
            dims.col_width(),
            dims.c_out,
            MatRef::row_major(&cols, dims.col_width()),
            MatRef::transposed(self.value(weight).data(), dims.col_width()),
            &mut out,
            false,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(dims.c_out) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![dims.batch, dims.len, dims.c_out], out)?;
        let op = Op::Conv1d {
            input,
            weight,
            bias,
            dims,
            cols,
        };
        self.push("conv1d", value, op, &[input, weight, bias])
    }

    /// Max pooling along the length axis, kernel 2 and stride 2.
    ///
    /// `[batch, len, c] -> [batch, len / 2, c]`; a trailing odd element is
    /// dropped. Ties pick the lower index.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        if s.len() != 3 || s[1] < 2 {
            return Err(Error::Shape {
                op: "maxpool1d",
                lhs: s,
                rhs: vec![],
            });
        }
        let (b, len, c) = (s[0], s[1], s[2]);
        let half = len / 2;
        let src = t.data();
        let mut out = Vec::with_capacity(b * half * c);
        let mut argmax = Vec::with_capacity(b * half * c);
        for bi in 0..b {
            for p in 0..half {
                let i0 = (bi * len + 2 * p) * c;
                let i1 = i0 + c;
                for ch in 0..c {
                    let (lo, hi) = (src[i0 + ch], src[i1 + ch]);
                    if hi > lo {
                        out.push(hi);
                        argmax.push(i1 + ch);
                    } else {
                        out.push(lo);
                        argmax.push(i0 + ch);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, half, c], out)?;
        self.push("maxpool1d", value, Op::MaxPool { input: x, argmax }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let (name, op) = if mean {
            ("mean", Op::Mean { input: x, axis })
        } else {
            ("sum", Op::Sum { input: x, axis })
        };
        let value = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                Tensor::scalar(if mean { s / t.numel() as f64 } else { s })
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: shape,
                        rhs: vec![ax],
                    });
                }
                let (outer, n, inner) = axis_split(&shape, ax);
                let src = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut out_shape = shape;
                out_shape[ax] = 1;
                Tensor::new(out_shape, out)?
            }
        };
        self.push(name, value, op, &[x])
    }

    /// Sum over all elements (`None`, giving shape `[1]`) or one axis (kept as extent 1).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Euclidean norm over the last axis, kept as extent 1.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let out: Vec<f64> = t
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(shape, out)?;
        self.push("l2_norm", value, Op::L2Norm(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *inputs
                    .first()
                    .ok_or_else(|| Error::Usage("concat of nothing".into()))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", value, op, inputs)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "slice",
            value,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node on its path.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss is not on this tape".into()))?;
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward on a tensor detached from every parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.backprop_binary(&node.op, node.value.shape(), *a, *b, g, grads)
            }
            Op::Scale(x, s) => {
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * s);
            }
            Op::Offset(x) | Op::Reshape(x) => {
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
            Op::Relu(x) => {
                self.unary_grad(*x, g, grads, |xi, _| if xi > 0.0 { 1.0 } else { 0.0 }, out)
            }
            Op::Tanh(x) => self.unary_grad(*x, g, grads, |_, yi| 1.0 - yi * yi, out),
            Op::Atanh(x) => self.unary_grad(*x, g, grads, |xi, _| 1.0 / (1.0 - xi * xi), out),
            Op::Softplus(x) => self.unary_grad(*x, g, grads, |xi, _| sigmoid(xi), out),
            Op::Sqrt(x) => self.unary_grad(*x, g, grads, |_, yi| 0.5 / yi, out),
            Op::Square(x) => self.unary_grad(*x, g, grads, |xi, _| 2.0 * xi, out),
            Op::Clamp { input, lo, hi } => self.unary_grad(
                *input,
                g,
                grads,
                |xi, _| if xi >= *lo && xi <= *hi { 1.0 } else { 0.0 },
                out,
            ),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g, n),
                        MatRef::transposed(tb.data(), n),
                        ga,
                        true,
                    );
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(ta.data(), k),
                        MatRef::row_major(g, n),
                        gb,
                        true,
                    );
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let gx = accumulate(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
                cols,
            } => {
                let rows = dims.batch * dims.len;
                let width = dims.col_width();
                if self.wants(*weight) {
                    let gw = accumulate(grads, *weight, dims.c_out * width);
                    gemm(
                        dims.c_out,
                        rows,
                        width,
                        MatRef::transposed(g, dims.c_out),
                        MatRef::row_major(cols, width),
                        gw,
                        true,
                    );
                }
                if self.wants(*bias) {
                    let gb = accumulate(grads, *bias, dims.c_out);
                    for row in g.chunks(dims.c_out) {
                        gb.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
                    }
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; rows * width];
                    gemm(
                        rows,
                        dims.c_out,
                        width,
                        MatRef::row_major(g, dims.c_out),
                        MatRef::row_major(self.value(*weight).data(), width),
                        &mut dcols,
                        false,
                    );
                    let dx = col2im(&dcols, *dims);
                    let gx = accumulate(grads, *input, dx.len());
                    gx.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v);
                }
            }
            Op::MaxPool { input, argmax } => {
                let len = self.value(*input).numel();
                let gx = accumulate(grads, *input, len);
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let gx = accumulate(grads, *x, g.len());
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let shape = self.shape(*input).to_vec();
                let len = numel(&shape);
                let gx = accumulate(grads, *input, len);
                match axis {
                    None => {
                        let gi = if mean { g[0] / len as f64 } else { g[0] };
                        gx.iter_mut().for_each(|d| *d += gi);
                    }
                    Some(ax) => {
                        let (outer, n, inner) = axis_split(&shape, *ax);
                        let div = if mean { n as f64 } else { 1.0 };
                        for o in 0..outer {
                            for j in 0..n {
                                let base = (o * n + j) * inner;
                                for i in 0..inner {
                                    gx[base + i] += g[o * inner + i] / div;
                                }
                            }
                        }
                    }
                }
            }
            Op::L2Norm(x) => {
                let tx = self.value(*x);
                let n = *tx.shape().last().unwrap();
                let gx = accumulate(grads, *x, tx.numel());
                for (r, (xr, dr)) in tx.data().chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    let norm = out[r];
                    if norm > 0.0 {
                        let s = g[r] / norm;
                        dr.iter_mut().zip(xr).for_each(|(d, &xi)| *d += s * xi);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let gv = accumulate(grads, v, outer * n * inner);
                        for o in 0..outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gv[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let len = node.value.shape()[*axis];
                let gx = accumulate(grads, *input, numel(&shape));
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
    }

    fn unary_grad(
        &self,
        x: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let xs = self.value(x).data();
        let gx = accumulate(grads, x, g.len());
        for (((d, &gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xs).zip(out) {
            *d += gi * deriv(xi, yi);
        }
    }

    fn backprop_binary(
        &self,
        op: &Op,
        out_shape: &[usize],
        a: Var,
        b: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (xa, xb) = (ta.data(), tb.data());
        let sa = broadcast_strides(ta.shape(), out_shape);
        let sb = broadcast_strides(tb.shape(), out_shape);
        let (da, db): (Partial, Partial) = match op {
            Op::Add(..) => (Box::new(|_, _| 1.0), Box::new(|_, _| 1.0)),
            Op::Sub(..) => (Box::new(|_, _| 1.0), Box::new(|_, _| -1.0)),
            Op::Mul(..) => (Box::new(|_, ib| xb[ib]), Box::new(|ia, _| xa[ia])),
            Op::Div(..) => (
                Box::new(|_, ib| 1.0 / xb[ib]),
                Box::new(|ia, ib| -xa[ia] / (xb[ib] * xb[ib])),
            ),
            _ => unreachable!(),
        };
        if self.wants(a) {
            let ga = accumulate(grads, a, xa.len());
            broadcast_for_each(out_shape, &sa, &sb, |i, ia, ib| ga[ia] += g[i] * da(ia, ib));
        }
        if self.wants(b) {
            let gb = accumulate(grads, b, xb.len());
            broadcast_for_each(out_shape, &sa, &sb, |i, ia, ib| gb[ib] += g[i] * db(ia, ib));
        }
    }
}

/// Local partial derivative of a binary op, indexed by operand offsets.
type Partial<'a> = Box<dyn Fn(usize, usize) -> f64 + 'a>;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

#[cfg(test)]
mod tests;
