//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value; `backward` replays the
//! tape in reverse. Nodes are appended in execution order, so the tape is a
//! topological order by construction and each node is visited exactly once.
//! Gradients of a node consumed several times accumulate additively.

use crate::error::{Error, Result};
use crate::tensor::{self, axis_split, gemm, ConvGeometry, Layout, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Scale(Var, Var),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Softplus(Var),
    L2Normalize { x: Var, axis: usize, norms: Vec<f32> },
    Softmax { x: Var, axis: usize },
    Upsample { x: Var, factor: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    ReduceSum { x: Var, axis: usize },
    ReduceMax { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    BceWithLogits { x: Var, target: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. One graph is owned by one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: u64,
    scope: String,
}

/// Norm floor used by [`Graph::l2_normalize`].
pub const NORM_EPS: f32 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations counted so far (2 per multiply-accumulate).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Label attached to non-finite errors raised by subsequent ops.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            let at = if self.scope.is_empty() {
                name.to_string()
            } else {
                format!("{name} in {}", self.scope)
            };
            return Err(Error::NonFinite(at));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        self.flops += 2 * (m * k * self.shape(b)[1]) as u64;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![geom.c_out],
                });
            }
        }
        let data = tensor::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        self.flops += 2 * geom.macs();
        let out = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.flops += out.numel() as u64;
        self.push(name, out, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.flops += out.numel() as u64;
        self.push(name, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("maximum", a, b, f32::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("minimum", a, b, f32::min, Op::Minimum(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.map("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.map("mul_scalar", x, |v| v * c, Op::MulScalar(x, c))
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "scale",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).item();
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.flops += out.numel() as u64;
        self.push("scale", out, Op::Scale(x, s), &[x, s])
    }

    /// Adds the vector `b` (length `cols`) to every row of the matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(b) != [shape[1]] {
            return Err(Error::Shape {
                op: "add_row_bias",
                lhs: shape,
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(shape[1]) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        self.flops += data.len() as u64;
        let out = Tensor::new(shape, data)?;
        self.push("add_row_bias", out, Op::AddRowBias(x, b), &[x, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, softplus, Op::Softplus(x))
    }

    /// Divides each slice along `axis` by `max(‖slice‖₂, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, extent, inner) = axis_split(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut data = src.to_vec();
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut ss = 0.0f32;
                for e in 0..extent {
                    let v = src[(o * extent + e) * inner + i];
                    ss += v * v;
                }
                let n = ss.sqrt().max(NORM_EPS);
                norms[o * inner + i] = n;
                for e in 0..extent {
                    data[(o * extent + e) * inner + i] /= n;
                }
            }
        }
        self.flops += 3 * data.len() as u64;
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("l2_normalize", out, Op::L2Normalize { x, axis, norms }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, extent, inner) = axis_split(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut data = src.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let m = (0..extent).map(|e| src[idx(e)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                for e in 0..extent {
                    let v = (src[idx(e)] - m).exp();
                    data[idx(e)] = v;
                    z += v;
                }
                for e in 0..extent {
                    data[idx(e)] /= z;
                }
            }
        }
        self.flops += 4 * data.len() as u64;
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// Nearest-neighbour upsampling of a `C×H×W` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || factor == 0 {
            return Err(Error::Shape {
                op: "upsample_nearest",
                lhs: shape,
                rhs: vec![factor],
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let (ho, wo) = (h * factor, w * factor);
        let mut data = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let srow = &src[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                let drow = &mut data[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], data)?;
        self.push("upsample_nearest", out, Op::Upsample { x, factor }, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        axis_split(&first, axis)?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis)?;
        if start + len > extent {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Selects rows of a rank-2 tensor (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: shape,
                rhs: rows.to_vec(),
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * shape[1]);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::new(vec![rows.len(), shape[1]], data)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * extent + e) * inner + i];
                }
            }
        }
        self.flops += src.len() as u64;
        let out = Tensor::new(Self::reduced_shape(&shape, axis), data)?;
        self.push("reduce_sum", out, Op::ReduceSum { x, axis }, &[x])
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let extent = *self.shape(x).get(axis).ok_or(Error::Axis {
            axis,
            rank: self.shape(x).len(),
        })?;
        let s = self.reduce_sum(x, axis)?;
        self.mul_scalar(s, 1.0 / extent as f32)
    }

    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis)?;
        let src = self.value(x).data();
        let mut data = vec![f32::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    let idx = (o * extent + e) * inner + i;
                    if src[idx] > data[o * inner + i] {
                        data[o * inner + i] = src[idx];
                        argmax[o * inner + i] = idx;
                    }
                }
            }
        }
        let out = Tensor::new(Self::reduced_shape(&shape, axis), data)?;
        self.push("reduce_max", out, Op::ReduceMax { x, argmax }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum::<f32>();
        self.flops += self.value(x).numel() as u64;
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.mul_scalar(s, 1.0 / n as f32)
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Elementwise binary cross-entropy between `sigmoid(x)` and `target`.
    ///
    /// Evaluated as `max(x,0) − x·t + ln(1 + e^{−|x|})`, which never takes the
    /// log of zero; the gradient is `sigmoid(x) − t`.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.shape(x).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| bce_logit(v, t))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.flops += 4 * out.numel() as u64;
        self.push(
            "bce_with_logits",
            out,
            Op::BceWithLogits {
                x,
                target: target.data().to_vec(),
            },
            &[x],
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Usage(
                "backward on a tensor that does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    gemm(m, n, k, g, Layout::Normal, self.value(*b).data(), Layout::Transposed, ga, 1.0);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    gemm(k, m, n, self.value(*a).data(), Layout::Transposed, g, Layout::Normal, gb, 1.0);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = self.requires_grad(*input).then(|| self.take(grads, *input));
                let mut gk = self.requires_grad(*kernel).then(|| self.take(grads, *kernel));
                let mut gb = bias
                    .filter(|b| self.requires_grad(*b))
                    .map(|b| self.take(grads, b));
                tensor::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gk {
                    grads[kernel.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (gb, bias) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| g[i] * bv[i]);
                self.accumulate(grads, *b, |i| g[i] * av[i]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| g[i] / bv[i]);
                self.accumulate(grads, *b, |i| -g[i] * av[i] / (bv[i] * bv[i]));
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let is_max = matches!(node.op, Op::Maximum(..));
                // ties route the gradient to the first operand
                let pick_a = |i: usize| if is_max { av[i] >= bv[i] } else { av[i] <= bv[i] };
                self.accumulate(grads, *a, |i| if pick_a(i) { g[i] } else { 0.0 });
                self.accumulate(grads, *b, |i| if pick_a(i) { 0.0 } else { g[i] });
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |i| g[i]),
            Op::MulScalar(x, c) => self.accumulate(grads, *x, |i| g[i] * c),
            Op::Scale(x, s) => {
                let c = self.value(*s).item();
                self.accumulate(grads, *x, |i| g[i] * c);
                if self.requires_grad(*s) {
                    let xv = self.value(*x).data();
                    let total: f32 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    self.slot(grads, *s)[0] += total;
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, |i| g[i]);
                if self.requires_grad(*b) {
                    let cols = self.shape(*x)[1];
                    let gb = self.slot(grads, *b);
                    for row in g.chunks(cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| {
                    let s = sigmoid(xv[i]);
                    g[i] * (s + xv[i] * s * (1.0 - s))
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| if xv[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| g[i] * sigmoid(xv[i]));
            }
            Op::L2Normalize { x, axis, norms } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (outer, extent, inner) = axis_split(self.shape(*x), *axis).unwrap();
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |e: usize| (o * extent + e) * inner + i;
                        let n = norms[o * inner + i];
                        if n <= NORM_EPS {
                            // floor active: y = x / eps is linear in x
                            for e in 0..extent {
                                gx[idx(e)] += g[idx(e)] / n;
                            }
                            continue;
                        }
                        let proj: f32 = (0..extent).map(|e| g[idx(e)] * out[idx(e)]).sum();
                        for e in 0..extent {
                            gx[idx(e)] += (g[idx(e)] - out[idx(e)] * proj) / n;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (outer, extent, inner) = axis_split(self.shape(*x), *axis).unwrap();
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |e: usize| (o * extent + e) * inner + i;
                        let dot: f32 = (0..extent).map(|e| g[idx(e)] * out[idx(e)]).sum();
                        for e in 0..extent {
                            gx[idx(e)] += out[idx(e)] * (g[idx(e)] - dot);
                        }
                    }
                }
            }
            Op::Upsample { x, factor } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h * factor, w * factor);
                let gx = self.slot(grads, *x);
                for ch in 0..c {
                    for y in 0..ho {
                        for xo in 0..wo {
                            gx[(ch * h + y / factor) * w + xo / factor] += g[(ch * ho + y) * wo + xo];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let gv = self.slot(grads, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            for (d, s) in gv[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (outer, extent, inner) = axis_split(self.shape(*x), *axis).unwrap();
                let len = node.value.shape()[*axis];
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    for (d, s) in gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += s;
                    }
                }
            }
            Op::Transpose(x) => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = self.slot(grads, *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let cols = self.shape(*x)[1];
                let gx = self.slot(grads, *x);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        gx[r * cols + j] += g[k * cols + j];
                    }
                }
            }
            Op::ReduceSum { x, axis } => {
                let (_, extent, inner) = axis_split(self.shape(*x), *axis).unwrap();
                self.accumulate(grads, *x, |idx| {
                    let o = idx / (extent * inner);
                    g[o * inner + idx % inner]
                });
            }
            Op::ReduceMax { x, argmax, .. } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let gx = self.slot(grads, *x);
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] += g[k];
                }
            }
            Op::SumAll(x) => self.accumulate(grads, *x, |_| g[0]),
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| g[i] * (sigmoid(xv[i]) - target[i]));
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> &'a mut [f32] {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn take(&self, grads: &mut [Option<Vec<f32>>], v: Var) -> Vec<f32> {
        let n = self.value(v).numel();
        grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl Fn(usize) -> f32) {
        if !self.requires_grad(v) {
            return;
        }
        let gv = self.slot(grads, v);
        for (i, d) in gv.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` contributed to it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn bce_logit(x: f32, t: f32) -> f32 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.l2_normalize(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_zero_vector_stays_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.l2_normalize(x, 1).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[7], 2.5));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-7);
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3], 0.3));
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let mut g = Graph::new();
        let data = vec![0.5, -1.5, 2.0, 3.0];
        let x = g.param(Tensor::from_vec(data.clone()));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let l = g.mul_scalar(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), data.as_slice());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let a = g.add(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let s = g.sum_all(b).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let c = g.constant(Tensor::zeros(&[3]));
        let s = g.sum_all(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_output_names_the_scope() {
        let mut g = Graph::new();
        g.set_scope("neck.p4");
        let a = g.constant(Tensor::from_vec(vec![1.0]));
        let b = g.constant(Tensor::from_vec(vec![0.0]));
        let err = g.div(a, b).unwrap_err().to_string();
        assert!(err.contains("neck.p4"), "{err}");
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![5., 6.]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5., 6.]);
        assert!(matches!(g.concat(&[a, b], 0), Err(Error::Shape { .. })));
        assert!(matches!(g.reduce_sum(a, 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let l = g.bce_with_logits(x, &Tensor::from_vec(vec![0.0, 1.0, 0.3, 0.7])).unwrap();
        for v in g.value(l).data() {
            assert!((v - std::f32::consts::LN_2).abs() < 1e-6);
        }
    }
}
