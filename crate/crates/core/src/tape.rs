//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to route gradients back to its inputs. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid reverse
//! topological order and each node is visited exactly once.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{check_shape, Scalar, Tensor};
use crate::Rng;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: Scalar,
    },
    LeakyRelu {
        x: Var,
        alpha: Scalar,
    },
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxLast(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Depthwise {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Pointwise {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Dropout {
        x: Var,
        // Per (batch, channel) multiplier: 0 or 1/(1-rate).
        scale: Vec<Scalar>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward evaluation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Scalar>>>,
    backward_done: bool,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, len, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-major transpose of `data` laid out as `shape` by `perm`.
fn permute(data: &[Scalar], shape: &[usize], perm: &[usize]) -> (Vec<Scalar>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        // Odometer increment over the output index.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Gradient buffer of an input, or None when it needs no gradient.
fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<Scalar>>], v: Var) -> Option<&'g mut [Scalar]> {
    let n = &nodes[v.index];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.index].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn add_into(acc: &mut [Scalar], src: &[Scalar]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            trace: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `(label, shape)` pairs passed to [`Tape::trace`] from now on.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&mut self, label: impl Into<String>, v: Var) {
        if self.trace.is_some() {
            let shape = self.nodes[v.index].value.shape().to_vec();
            if let Some(t) = self.trace.as_mut() {
                t.push((label.into(), shape));
            }
        }
    }

    pub fn traced_shapes(&self) -> &[(String, Vec<usize>)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// A trainable leaf; gradients are retained after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.id {
            return None;
        }
        let g = self.grads.get(v.index)?.as_ref()?;
        Tensor::new(self.nodes[v.index].value.shape(), g.clone()).ok()
    }

    /// Drops stored gradients so that [`Tape::backward`] may run again.
    pub fn clear_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn check(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        for v in vars {
            if v.tape != self.id || v.index >= self.nodes.len() {
                return Err(Error::Tape(format!("{op}: variable is detached from this tape")));
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(op, &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(op_name, value, op, &[a, b])
    }

    fn map(&mut self, op_name: &'static str, x: Var, op: Op, f: impl Fn(Scalar) -> Scalar) -> Result<Var> {
        self.check(op_name, &[x])?;
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(op_name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: Scalar, shift: Scalar) -> Result<Var> {
        self.map("affine", x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    /// `max(x, alpha * x)`; the derivative at zero is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, alpha: Scalar) -> Result<Var> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid("leaky_relu", format!("slope must be in (0,1), got {alpha}")));
        }
        self.map("leaky_relu", x, Op::LeakyRelu { x, alpha }, |v| if v >= 0.0 { v } else { alpha * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, Op::Tanh(x), Scalar::tanh)
    }

    /// Softmax over the trailing axis with max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.check("softmax_channels", &[x])?;
        let t = self.value(x);
        let c = t.channels();
        if c < 2 {
            return Err(Error::invalid("softmax_channels", "need at least 2 channels"));
        }
        let mut data = t.data().to_vec();
        for px in data.chunks_mut(c) {
            let m = px.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut z = 0.0;
            for v in px.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in px.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(t.shape(), data)?;
        self.push("softmax_channels", value, Op::SoftmaxLast(x), &[x])
    }

    /// Same-padded dilated convolution. `kernel` is `[kh, kw, cin, cout]`,
    /// `bias` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        self.check(OP, &[x, kernel])?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 {
            return Err(Error::invalid(OP, format!("kernel must be [kh,kw,cin,cout], got {ks:?}")));
        }
        let xs = self.shape(x).to_vec();
        let geom = ConvGeometry::new(OP, &xs, ks[0], ks[1], dilation)?;
        let (cin, cout) = (ks[2], ks[3]);
        if xs[3] != cin {
            return Err(Error::shape(OP, &[xs[0], xs[1], xs[2], cin], &xs));
        }
        if let Some(b) = bias {
            self.check(OP, &[b])?;
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, &[cout], self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            cin,
            cout,
        );
        let value = Tensor::new(&[xs[0], xs[1], xs[2], cout], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(OP, value, Op::Conv2d { x, kernel, bias, geom }, &inputs)
    }

    /// Per-channel dilated convolution. `kernel` is `[kh, kw, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        const OP: &str = "depthwise_conv2d";
        self.check(OP, &[x, kernel])?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 {
            return Err(Error::invalid(OP, format!("kernel must be [kh,kw,c], got {ks:?}")));
        }
        let xs = self.shape(x).to_vec();
        let geom = ConvGeometry::new(OP, &xs, ks[0], ks[1], dilation)?;
        if xs[3] != ks[2] {
            return Err(Error::invalid(
                OP,
                format!("kernel has {} channels, input has {}", ks[2], xs[3]),
            ));
        }
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(kernel).data(), &geom, ks[2]);
        let value = Tensor::new(&xs, out)?;
        self.push(OP, value, Op::Depthwise { x, kernel, geom }, &[x, kernel])
    }

    /// 1x1 convolution. `weight` is `[cin, cout]`, `bias` is `[cout]`.
    pub fn pointwise_conv(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "pointwise_conv";
        self.check(OP, &[x, weight])?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(Error::invalid(OP, format!("weight must be [cin,cout], got {ws:?}")));
        }
        let xs = self.shape(x).to_vec();
        let (cin, cout) = (ws[0], ws[1]);
        if *xs.last().unwrap() != cin {
            return Err(Error::invalid(
                OP,
                format!("weight expects {cin} input channels, input has {}", xs.last().unwrap()),
            ));
        }
        if let Some(b) = bias {
            self.check(OP, &[b])?;
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, &[cout], self.shape(b)));
            }
        }
        let out = kernels::pointwise_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            cin,
            cout,
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(OP, value, Op::Pointwise { x, weight, bias }, &inputs)
    }

    /// Depthwise dilated convolution followed by a 1x1 pointwise mix.
    pub fn separable_atrous_conv(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        self.check("separable_atrous_conv", &[x, depthwise, pointwise])?;
        let (dc, pc) = (self.shape(depthwise).last().copied(), self.shape(pointwise).first().copied());
        if dc != pc {
            return Err(Error::invalid(
                "separable_atrous_conv",
                format!("depthwise emits {dc:?} channels, pointwise expects {pc:?}"),
            ));
        }
        let d = self.depthwise_conv2d(x, depthwise, dilation)?;
        self.pointwise_conv(d, pointwise, bias)
    }

    /// Concatenates along the trailing axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        self.check(OP, xs)?;
        let first = xs.first().ok_or_else(|| Error::invalid(OP, "nothing to concatenate"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(OP, &lead, &s[..s.len() - 1]));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let pixels: usize = lead.iter().product();
        let mut data = Vec::with_capacity(pixels * total);
        for p in 0..pixels {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[p * w..(p + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push(OP, value, Op::ConcatLast(xs.to_vec()), xs)
    }

    /// Channels `start..start+len` of the trailing axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        self.check(OP, &[x])?;
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if len == 0 || start + len > c {
            return Err(Error::invalid(OP, format!("range {start}..{} outside {c} channels", start + len)));
        }
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        self.push(OP, value, Op::SliceLast { x, start }, &[x])
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        const OP: &str = "select";
        self.check(OP, &[x])?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 || index >= s[axis] {
            return Err(Error::invalid(OP, format!("index {index} on axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_at_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(&shape, data)?;
        self.push(OP, value, Op::Select { x, axis, index }, &[x])
    }

    /// Stacks same-shape values along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "stack";
        self.check(OP, xs)?;
        let first = xs.first().ok_or_else(|| Error::invalid(OP, "nothing to stack"))?;
        let s = self.shape(*first).to_vec();
        if axis > s.len() {
            return Err(Error::invalid(OP, format!("axis {axis} out of range for {s:?}")));
        }
        for &v in xs {
            if self.shape(v) != &s[..] {
                return Err(Error::shape(OP, &s, self.shape(v)));
            }
        }
        let mut shape = s.clone();
        shape.insert(axis, xs.len());
        check_shape(OP, &shape)?;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for &v in xs {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        self.push(OP, value, Op::Stack { xs: xs.to_vec(), axis }, xs)
    }

    pub fn transpose_axes(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        const OP: &str = "transpose_axes";
        self.check(OP, &[x])?;
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(OP, format!("{perm:?} is not a permutation of {} axes", s.len())));
        }
        let (data, shape) = permute(self.value(x).data(), &s, perm);
        let value = Tensor::new(&shape, data)?;
        self.push(OP, value, Op::Transpose { x, perm: perm.to_vec() }, &[x])
    }

    /// Swaps two axes.
    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::invalid("swap_axes", format!("axes {a},{b} out of range")));
        }
        perm.swap(a, b);
        self.transpose_axes(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check("reshape", &[x])?;
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Appends a trailing axis of size 1.
    pub fn expand_last_dim(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        shape.push(1);
        self.reshape(x, &shape)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        const OP: &str = "sum_axis";
        self.check(OP, &[x])?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(Error::invalid(OP, format!("axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_at_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let acc = &mut data[o * inner..(o + 1) * inner];
            for k in 0..n {
                add_into(acc, &src[(o * n + k) * inner..(o * n + k + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(&shape, data)?;
        self.push(OP, value, Op::SumAxis { x, axis }, &[x])
    }

    /// Sums the trailing axis away.
    pub fn sum_last_dim(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.sum_axis(x, axis)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", &[x])?;
        let total: Scalar = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check("mean", &[x])?;
        let t = self.value(x);
        let m = t.data().iter().sum::<Scalar>() / t.len() as Scalar;
        self.push("mean", Tensor::scalar(m), Op::MeanAll(x), &[x])
    }

    /// Drops whole channels of a `[B,H,W,C]` value with probability `rate`,
    /// scaling survivors by `1/(1-rate)`. `rng = None` means inference: the
    /// input is returned unchanged.
    pub fn spatial_dropout(&mut self, x: Var, rate: Scalar, rng: Option<&mut Rng>) -> Result<Var> {
        const OP: &str = "spatial_dropout";
        self.check(OP, &[x])?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(OP, format!("rate must be in [0,1), got {rate}")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(OP, format!("expects [B,H,W,C], got {s:?}")));
        }
        let (b, c) = (s[0], s[3]);
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<Scalar> = (0..b * c)
            .map(|_| if (rng.gen::<f64>() as Scalar) < rate { 0.0 } else { keep })
            .collect();
        let per_item = s[1] * s[2] * c;
        let src = self.value(x).data();
        let data = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[(i / per_item) * c + i % c])
            .collect();
        let value = Tensor::new(&s, data)?;
        self.push(OP, value, Op::Dropout { x, scale }, &[x])
    }

    /// Back-propagates from a scalar root, accumulating gradients on every
    /// trainable leaf that reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check("backward", &[loss])?;
        if self.backward_done {
            return Err(Error::Tape("backward already ran; call clear_grads first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.index].requires_grad {
            return Err(Error::Tape("backward root does not depend on any parameter".into()));
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                debug_assert!(matches!(self.nodes[idx].op, Op::Leaf));
            }
        }
        grads.resize(self.nodes.len(), None);
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.index].value.data();
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |ga| add_into(ga, g));
                acc!(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |ga| add_into(ga, g));
                acc!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / vb[i];
                    }
                });
                acc!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * out[i] / vb[i];
                    }
                });
            }
            Op::Affine { x, scale } => acc!(*x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * scale;
                }
            }),
            Op::LeakyRelu { x, alpha } => {
                let vx = val(*x);
                acc!(*x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += if vx[i] >= 0.0 { g[i] } else { g[i] * alpha };
                    }
                })
            }
            Op::Sigmoid(x) => acc!(*x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Tanh(x) => acc!(*x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::SoftmaxLast(x) => {
                let c = node.value.channels();
                acc!(*x, |gx| {
                    for ((gxp, gp), yp) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: Scalar = gp.iter().zip(yp).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            gxp[k] += yp[k] * (gp[k] - dot);
                        }
                    }
                })
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let ks = nodes[kernel.index].value.shape();
                let (cin, cout) = (ks[2], ks[3]);
                acc!(*x, |gx| kernels::conv2d_backward_input(g, val(*kernel), geom, cin, cout, gx));
                acc!(*kernel, |gk| kernels::conv2d_backward_kernel(val(*x), g, geom, cin, cout, gk));
                if let Some(b) = bias {
                    acc!(*b, |gb| kernels::bias_backward(g, cout, gb));
                }
            }
            Op::Depthwise { x, kernel, geom } => {
                let c = nodes[kernel.index].value.channels();
                acc!(*x, |gx| kernels::depthwise_backward_input(g, val(*kernel), geom, c, gx));
                acc!(*kernel, |gk| kernels::depthwise_backward_kernel(val(*x), g, geom, c, gk));
            }
            Op::Pointwise { x, weight, bias } => {
                let ws = nodes[weight.index].value.shape();
                let (cin, cout) = (ws[0], ws[1]);
                acc!(*x, |gx| kernels::pointwise_backward_input(g, val(*weight), cin, cout, gx));
                acc!(*weight, |gw| kernels::pointwise_backward_weight(val(*x), g, cin, cout, gw));
                if let Some(b) = bias {
                    acc!(*b, |gb| kernels::bias_backward(g, cout, gb));
                }
            }
            Op::ConcatLast(xs) => {
                let total = node.value.channels();
                let mut start = 0;
                for &v in xs {
                    let w = nodes[v.index].value.channels();
                    acc!(v, |gv| {
                        for (dst, src) in gv.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dst, &src[start..start + w]);
                        }
                    });
                    start += w;
                }
            }
            Op::SliceLast { x, start } => {
                let c = nodes[x.index].value.channels();
                let w = node.value.channels();
                acc!(*x, |gx| {
                    for (dst, src) in gx.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut dst[*start..start + w], src);
                    }
                })
            }
            Op::Select { x, axis, index } => {
                let (outer, n, inner) = split_at_axis(nodes[x.index].value.shape(), *axis);
                acc!(*x, |gx| {
                    for o in 0..outer {
                        let base = (o * n + index) * inner;
                        add_into(&mut gx[base..base + inner], &g[o * inner..(o + 1) * inner]);
                    }
                })
            }
            Op::Stack { xs, axis } => {
                let (outer, n, inner) = split_at_axis(node.value.shape(), *axis);
                for (k, &v) in xs.iter().enumerate() {
                    acc!(v, |gv| {
                        for o in 0..outer {
                            let base = (o * n + k) * inner;
                            add_into(&mut gv[o * inner..(o + 1) * inner], &g[base..base + inner]);
                        }
                    });
                }
            }
            Op::Transpose { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc!(*x, |gx| {
                    let (back, _) = permute(g, node.value.shape(), &inverse);
                    add_into(gx, &back);
                })
            }
            Op::Reshape(x) => acc!(*x, |gx| add_into(gx, g)),
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_at_axis(nodes[x.index].value.shape(), *axis);
                acc!(*x, |gx| {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            add_into(&mut gx[base..base + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                })
            }
            Op::SumAll(x) => acc!(*x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(x) => {
                let n = nodes[x.index].value.len() as Scalar;
                acc!(*x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::Dropout { x, scale } => {
                let s = node.value.shape();
                let (c, per_item) = (s[3], s[1] * s[2] * s[3]);
                acc!(*x, |gx| {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i] * scale[(i / per_item) * c + i % c];
                    }
                })
            }
        }
    }
}
