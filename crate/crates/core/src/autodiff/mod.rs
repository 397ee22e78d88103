//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates eagerly,
//! stores its result, and records the inputs its adjoint needs. Nodes are
//! appended in evaluation order, so reverse insertion order is a valid
//! reverse topological order for [`Graph::backward`].
//!
//! Spatial primitives use the `[N, H, W, C]` layout; rank-3 `[H, W, C]`
//! inputs are accepted and treated as a batch of one.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use kernels::{ConvGeometry, ResizePlan};

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
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Hinge(Var, f64),
    Pow(Var, f64),
    Sum { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    BroadcastTo(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, geo: ConvGeometry },
    Resize { x: Var, plan: ResizePlan },
    Concat { xs: Vec<Var>, axis: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    StopGradient(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Hinge(..) => "hinge",
            Op::Pow(..) => "pow",
            Op::Sum { .. } => "sum",
            Op::SumAll(_) => "sum_all",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Abs(x)
            | Op::Relu(x)
            | Op::Hinge(x, _)
            | Op::Pow(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::BroadcastTo(x)
            | Op::StopGradient(x) => vec![*x],
            Op::Sum { x, .. }
            | Op::Permute { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Resize { x, .. }
            | Op::IndexSelect { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One entry of a recorded forward trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn spatial_dims(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [h, w, c] => Ok([1, h, w, c]),
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::invalid(op, format!("expected [N,H,W,C] or [H,W,C], got {shape:?}"))),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, d) | (d, 1) => d,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums `g` (of `out_shape`) back down to `in_shape`.
fn reduce_to(g: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Tensor {
    if in_shape == out_shape {
        return Tensor::new(in_shape, g.to_vec()).expect("matching shapes");
    }
    let idx = kernels::broadcast_index(in_shape, out_shape);
    let mut out = Tensor::zeros(in_shape);
    let data = out.data_mut();
    for (gv, &i) in g.iter().zip(&idx) {
        data[i] += gv;
    }
    out
}

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant | Op::StopGradient(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
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

    /// Operation names, input indices and output shapes in evaluation order.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .map(|n| TraceEntry {
                op: n.op.name(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ia = kernels::broadcast_index(&sa, &out_shape);
            let ib = kernels::broadcast_index(&sb, &out_shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok(self.push(Tensor::new(&out_shape, data)?, op))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `max(x - t, 0)`.
    pub fn hinge(&mut self, x: Var, t: f64) -> Var {
        self.unary(x, |v| (v - t).max(0.0), Op::Hinge(x, t))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Pow(x, p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.powf(x, 2.0)
    }

    /// Sum over one axis; the axis is removed.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let data = kernels::sum_axis(self.value(x).data(), &shape, axis);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Sum { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let idx = kernels::permute_index(&shape, axes);
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        match broadcast_shape(&src_shape, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", &src_shape, shape)),
        }
        let idx = kernels::broadcast_index(&src_shape, shape);
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::BroadcastTo(x)))
    }

    /// `[M, K] · [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let data = kernels::bmm(self.value(a).data(), self.value(b).data(), 1, sa[0], sa[1], sb[1]);
        Ok(self.push(Tensor::new(&[sa[0], sb[1]], data)?, Op::MatMul(a, b)))
    }

    /// `[B, M, K] · [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let data = kernels::bmm(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sa[2], sb[2]);
        Ok(self.push(Tensor::new(&[sa[0], sa[1], sb[2]], data)?, Op::BatchMatMul(a, b)))
    }

    fn check_softmax_input(&self, x: Var, axis: usize, name: &'static str) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::invalid(name, format!("axis {axis} for shape {shape:?}")));
        }
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("{name} input contains NaN")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_softmax_input(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let data = kernels::softmax(self.value(x).data(), &shape, axis, false);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_softmax_input(x, axis, "log_softmax")?;
        let shape = self.shape(x).to_vec();
        let data = kernels::softmax(self.value(x).data(), &shape, axis, true);
        Ok(self.push(Tensor::new(&shape, data)?, Op::LogSoftmax { x, axis }))
    }

    /// Same-padded convolution. `w` is `[k, k, Cin/groups, Cout]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, h, wd, cin] = spatial_dims(&xs, "conv2d")?;
        if ws.len() != 4 || ws[0] != ws[1] || ws[0] % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be [k,k,Cin/g,Cout] with odd k, got {ws:?}")));
        }
        if groups == 0 || cin % groups != 0 || ws[3] % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("group count {groups} does not divide Cin={cin} and Cout={}", ws[3]),
            ));
        }
        if ws[2] != cin / groups {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be positive"));
        }
        let geo = ConvGeometry {
            batch: n,
            height: h,
            width: wd,
            in_channels: cin,
            out_channels: ws[3],
            kernel: ws[0],
            stride,
            dilation,
            groups,
        };
        let data = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geo);
        let mut out_shape = vec![geo.out_height(), geo.out_width(), geo.out_channels];
        if xs.len() == 4 {
            out_shape.insert(0, n);
        }
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Conv2d { x, w, geo }))
    }

    /// Bilinear resize with half-pixel centres (align-corners off).
    pub fn bilinear_resize(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("bilinear_resize", "target extent must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let [n, h, w, c] = spatial_dims(&xs, "bilinear_resize")?;
        let plan = ResizePlan {
            batch: n,
            channels: c,
            src: (h, w),
            dst: (height, width),
        };
        let data = plan.forward(self.value(x).data());
        let mut out_shape = vec![height, width, c];
        if xs.len() == 4 {
            out_shape.insert(0, n);
        }
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Resize { x, plan }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::invalid("index_select", format!("indices {indices:?} on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&src[(o * len + i) * inner..][..inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::IndexSelect { x, axis, indices: indices.to_vec() },
        ))
    }

    /// Identity forward, zero adjoint.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient(x))
    }

    /// `[N, H, W, C] -> [N, C]` (or `[H, W, C] -> [C]`).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, h, w, c] = spatial_dims(&xs, "global_avg_pool")?;
        let flat = self.reshape(x, &[n, h * w, c])?;
        let m = self.mean_axis(flat, 1)?;
        if xs.len() == 3 {
            self.reshape(m, &[c])
        } else {
            Ok(m)
        }
    }

    /// Reverse pass from a scalar `loss`. Every reachable node that requires a
    /// gradient gets one.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.adjoints(&node.op, &node.value, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.data().iter().any(|v| v.is_nan()) {
                    return Err(Error::NonFinite(format!("gradient of node {i} ({})", self.nodes[i].op.name())));
                }
            }
        }
        Ok(Grads { grads })
    }

    fn adjoints(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: &Var| self.value(*v);
        let like = |v: &Var, data: Vec<f64>| Tensor::new(self.shape(*v), data);
        let gd = g.data();
        let out_shape = out.shape();
        let elementwise = |x: &Var, f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
            let data = val(x).data().iter().zip(gd).map(|(&xv, &gv)| f(xv, gv)).collect();
            like(x, data)
        };
        // Broadcast-aware product of g with an operand, reduced to `target`.
        let bcast_term = |other: &Var, target: &Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let (ts, os) = (self.shape(*target), self.shape(*other));
            let (tv, ov) = (val(target).data(), val(other).data());
            if ts == out_shape && os == out_shape {
                let data = (0..gd.len()).map(|k| f(gd[k], tv[k], ov[k])).collect();
                return Tensor::new(ts, data).expect("matching shapes");
            }
            let it = kernels::broadcast_index(ts, out_shape);
            let io = kernels::broadcast_index(os, out_shape);
            let prod: Vec<f64> = (0..gd.len()).map(|k| f(gd[k], tv[it[k]], ov[io[k]])).collect();
            reduce_to(&prod, ts, out_shape)
        };
        Ok(match op {
            Op::Leaf | Op::Constant | Op::StopGradient(_) => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(gd, self.shape(*a), out_shape)),
                (*b, reduce_to(gd, self.shape(*b), out_shape)),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                vec![
                    (*a, reduce_to(gd, self.shape(*a), out_shape)),
                    (*b, reduce_to(&neg, self.shape(*b), out_shape)),
                ]
            }
            Op::Mul(a, b) => vec![
                (*a, bcast_term(b, a, &|g, _, o| g * o)),
                (*b, bcast_term(a, b, &|g, _, o| g * o)),
            ],
            Op::Div(a, b) => vec![
                (*a, bcast_term(b, a, &|g, _, o| g / o)),
                (*b, bcast_term(a, b, &|g, t, o| -g * o / (t * t))),
            ],
            Op::Scale(x, s) => vec![(*x, elementwise(x, &|_, g| g * s)?)],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Abs(x) => vec![(*x, elementwise(x, &|v, g| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })?)],
            Op::Relu(x) => vec![(*x, elementwise(x, &|v, g| if v > 0.0 { g } else { 0.0 })?)],
            Op::Hinge(x, t) => vec![(*x, elementwise(x, &|v, g| if v > *t { g } else { 0.0 })?)],
            Op::Pow(x, p) => vec![(*x, elementwise(x, &|v, g| g * p * v.powf(p - 1.0))?)],
            Op::Sum { x, axis } => vec![(*x, like(x, kernels::expand_axis(gd, self.shape(*x), *axis))?)],
            Op::SumAll(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Reshape(x) => vec![(*x, like(x, gd.to_vec())?)],
            Op::Permute { x, axes } => {
                let idx = kernels::permute_index(self.shape(*x), axes);
                let mut gx = vec![0.0; gd.len()];
                for (gv, &i) in gd.iter().zip(&idx) {
                    gx[i] = *gv;
                }
                vec![(*x, like(x, gx)?)]
            }
            Op::BroadcastTo(x) => vec![(*x, reduce_to(gd, self.shape(*x), out_shape))],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ga, gb) = kernels::bmm_backward(val(a).data(), val(b).data(), gd, 1, sa[0], sa[1], sb[1]);
                vec![(*a, like(a, ga)?), (*b, like(b, gb)?)]
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ga, gb) = kernels::bmm_backward(val(a).data(), val(b).data(), gd, sa[0], sa[1], sa[2], sb[2]);
                vec![(*a, like(a, ga)?), (*b, like(b, gb)?)]
            }
            Op::Softmax { x, axis } => {
                vec![(*x, like(x, kernels::softmax_backward(out.data(), gd, out_shape, *axis, false))?)]
            }
            Op::LogSoftmax { x, axis } => {
                vec![(*x, like(x, kernels::softmax_backward(out.data(), gd, out_shape, *axis, true))?)]
            }
            Op::Conv2d { x, w, geo } => {
                let (gx, gw) = kernels::conv2d_backward(val(x).data(), val(w).data(), gd, geo);
                vec![(*x, like(x, gx)?), (*w, like(w, gw)?)]
            }
            Op::Resize { x, plan } => vec![(*x, like(x, plan.backward(gd))?)],
            Op::Concat { xs, axis } => {
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut start = 0;
                let mut res = Vec::with_capacity(xs.len());
                for v in xs {
                    let len = self.shape(*v)[*axis] * inner;
                    let mut gx = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gx.extend_from_slice(&gd[o * total + start..][..len]);
                    }
                    start += len;
                    res.push((*v, like(v, gx)?));
                }
                res
            }
            Op::IndexSelect { x, axis, indices } => {
                let (outer, len, inner) = kernels::axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let src = &gd[(o * indices.len() + k) * inner..][..inner];
                        for (a, b) in gx[(o * len + i) * inner..][..inner].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![(*x, like(x, gx)?)]
            }
        })
    }
}
