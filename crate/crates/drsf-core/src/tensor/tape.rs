//! The gradient tape: forward op recording and the reverse pass.
//!
//! Ops are methods on [`GradientTape`]. Each validates its operands,
//! computes the forward result through [`super::kernels`], and records a
//! node. The tape is append-only, so node order is already topological.
//! [`GradientTape::backward`] consumes the tape, enforcing the
//! one-backward-per-forward contract.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use super::kernels as kern;
use super::{check_finite, numel, TapeRef, Tensor};
use crate::error::{CoreError, Result};
use crate::math;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        a: NodeId,
    },
    MulScalar {
        a: NodeId,
        c: f64,
    },
    Sqrt {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Softplus {
        a: NodeId,
    },
    LogSoftmax {
        a: NodeId,
        axis: usize,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        bias: NodeId,
    },
    Mean {
        a: NodeId,
        axes: Vec<usize>,
    },
    Var {
        a: NodeId,
        axes: Vec<usize>,
    },
    SumAll {
        a: NodeId,
    },
    AvgPool2 {
        a: NodeId,
    },
    Upsample {
        a: NodeId,
        factor: usize,
    },
    Reshape {
        a: NodeId,
    },
    StackLast2 {
        a: NodeId,
        b: NodeId,
    },
    ChannelLinear2 {
        q: NodeId,
        w: NodeId,
    },
    Grl {
        a: NodeId,
        factor: f64,
    },
    PixelLinear {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    CePixels {
        logits: NodeId,
        labels: Arc<Vec<u16>>,
    },
    CePixelsCoarse {
        logits: NodeId,
        labels: Arc<Vec<u16>>,
        factor: usize,
    },
    Entropy {
        probs: NodeId,
    },
    RbfMmd2 {
        x: NodeId,
        y: NodeId,
        gamma: f64,
    },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { kind, .. } => match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        },
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Sqrt { .. } => "sqrt",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Softplus { .. } => "softplus",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Softmax { .. } => "softmax",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::Mean { .. } => "mean",
        Op::Var { .. } => "var",
        Op::SumAll { .. } => "sum_all",
        Op::AvgPool2 { .. } => "avg_pool2",
        Op::Upsample { .. } => "upsample_nearest",
        Op::Reshape { .. } => "reshape",
        Op::StackLast2 { .. } => "stack_last2",
        Op::ChannelLinear2 { .. } => "channel_linear2",
        Op::Grl { .. } => "grl",
        Op::PixelLinear { .. } => "pixel_linear",
        Op::CePixels { .. } => "cross_entropy_pixels",
        Op::CePixelsCoarse { .. } => "cross_entropy_pixels",
        Op::Entropy { .. } => "prediction_entropy",
        Op::RbfMmd2 { .. } => "rbf_mmd2",
    }
}

struct Node {
    values: Arc<Vec<f64>>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode gradient tape. One tape per training step.
pub struct GradientTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of all recorded operations, in execution order. Used by the
    /// inference-stripping audit.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| op_name(&n.op)).collect()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> Tensor {
        let values = Arc::new(values);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            values: Arc::clone(&values),
            shape: shape.clone(),
            op,
            needs_grad,
        });
        Tensor::from_parts(
            shape,
            values,
            needs_grad,
            Some(TapeRef {
                tape_id: self.id,
                node: id,
            }),
        )
    }

    fn push_checked(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Tensor> {
        check_finite(&values, op_name(&op))?;
        Ok(self.push(shape, values, op, needs_grad))
    }

    /// Register a tensor as a leaf (parameter or input).
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, requires_grad)
    }

    /// Node id of `t` on this tape, registering a constant leaf when `t`
    /// is untracked or belongs to another tape.
    fn ensure(&mut self, t: &Tensor) -> (NodeId, bool) {
        if let Some(r) = t.tape_ref {
            if r.tape_id == self.id {
                return (r.node, self.nodes[r.node.0].needs_grad);
            }
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            values: t.values_arc(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
        });
        (id, false)
    }

    fn vals(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    // -- elementwise ---------------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = kern::broadcast_plan(a.shape(), b.shape()).ok_or_else(|| {
            CoreError::ShapeMismatch(format!(
                "elementwise {:?} vs {:?} not broadcastable",
                a.shape(),
                b.shape()
            ))
        })?;
        if kind == BinKind::Div && b.values().iter().any(|v| math::abs(*v) < 1e-300) {
            return Err(CoreError::InvalidArgument(
                String::from("division by |b| < 1e-300"),
            ));
        }
        // one monomorphized instantiation per op kind
        let out = match kind {
            BinKind::Add => {
                kern::binary_broadcast(a.values(), a.shape(), b.values(), &plan, |x, y| x + y)
            }
            BinKind::Sub => {
                kern::binary_broadcast(a.values(), a.shape(), b.values(), &plan, |x, y| x - y)
            }
            BinKind::Mul => {
                kern::binary_broadcast(a.values(), a.shape(), b.values(), &plan, |x, y| x * y)
            }
            BinKind::Div => {
                kern::binary_broadcast(a.values(), a.shape(), b.values(), &plan, |x, y| x / y)
            }
        };
        let (na, ga) = self.ensure(a);
        let (nb, gb) = self.ensure(b);
        self.push_checked(
            a.shape().to_vec(),
            out,
            Op::Binary { kind, a: na, b: nb },
            ga || gb,
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|v| v + c).collect();
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::AddScalar { a: na }, ga)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|v| v * c).collect();
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::MulScalar { a: na, c }, ga)
    }

    // -- unary ---------------------------------------------------------------

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|&v| math::sqrt(v)).collect();
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::Sqrt { a: na }, ga)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::Relu { a: na }, ga)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|&v| math::sigmoid(v)).collect();
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::Sigmoid { a: na }, ga)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.values().iter().map(|&v| math::softplus(v)).collect();
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::Softplus { a: na }, ga)
    }

    // -- softmax family ------------------------------------------------------

    fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
        if axis >= shape.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn log_softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        Self::check_axis(a.shape(), axis)?;
        let v = a.values();
        let mut out = vec![0.0f64; v.len()];
        kern::for_each_axis_group(a.shape(), axis, |start, len, stride| {
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(v[start + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                sum += math::exp(v[start + i * stride] - m);
            }
            let lse = m + math::ln(sum);
            for i in 0..len {
                out[start + i * stride] = v[start + i * stride] - lse;
            }
        });
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::LogSoftmax { a: na, axis }, ga)
    }

    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        Self::check_axis(a.shape(), axis)?;
        let v = a.values();
        let mut out = vec![0.0f64; v.len()];
        kern::for_each_axis_group(a.shape(), axis, |start, len, stride| {
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(v[start + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = math::exp(v[start + i * stride] - m);
                out[start + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                out[start + i * stride] /= sum;
            }
        });
        let (na, ga) = self.ensure(a);
        self.push_checked(a.shape().to_vec(), out, Op::Softmax { a: na, axis }, ga)
    }

    // -- dense / conv --------------------------------------------------------

    /// Affine map x[N,Din] @ w[Din,Dout] + bias[Dout].
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (xs, ws, bs) = (x.shape(), w.shape(), bias.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(CoreError::ShapeMismatch(format!(
                "linear x{xs:?} w{ws:?} bias{bs:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let out = kern::linear_forward(x.values(), w.values(), bias.values(), n, din, dout);
        let (nx, gx) = self.ensure(x);
        let (nw, gw) = self.ensure(w);
        let (nb, gb) = self.ensure(bias);
        self.push_checked(
            vec![n, dout],
            out,
            Op::Linear {
                x: nx,
                w: nw,
                bias: nb,
            },
            gx || gw || gb,
        )
    }

    /// 3x3 stride-1 pad-1 convolution, x[N,Cin,H,W] * k[Cout,Cin,3,3] + bias.
    pub fn conv2d(&mut self, x: &Tensor, k: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (xs, ks, bs) = (x.shape(), k.shape(), bias.shape());
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || xs[1] != ks[1] {
            return Err(CoreError::ShapeMismatch(format!("conv2d x{xs:?} k{ks:?}")));
        }
        if bs != [ks[0]] {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d bias{bs:?} for cout {}",
                ks[0]
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ks[0];
        let out = kern::conv2d_forward(x.values(), k.values(), bias.values(), n, cin, cout, h, w);
        let (nx, gx) = self.ensure(x);
        let (nk, gk) = self.ensure(k);
        let (nb, gb) = self.ensure(bias);
        self.push_checked(
            vec![n, cout, h, w],
            out,
            Op::Conv2d {
                x: nx,
                k: nk,
                bias: nb,
            },
            gx || gk || gb,
        )
    }

    // -- reductions ----------------------------------------------------------

    fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
        if axes.is_empty() {
            return Err(CoreError::InvalidArgument(String::from(
                "empty axis set for reduction",
            )));
        }
        for (i, &a) in axes.iter().enumerate() {
            if a >= shape.len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "reduce axis {a} out of range for {shape:?}"
                )));
            }
            if axes[..i].contains(&a) {
                return Err(CoreError::InvalidArgument(format!("duplicate axis {a}")));
            }
        }
        Ok(())
    }

    /// Population mean over `axes`.
    pub fn mean(&mut self, a: &Tensor, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        Self::check_axes(a.shape(), axes)?;
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        let out = kern::reduce_mean(a.values(), a.shape(), &axes);
        let shape = if keep_dims {
            kern::reduced_shape_keep(a.shape(), &axes)
        } else {
            kern::reduced_shape_drop(a.shape(), &axes)
        };
        let (na, ga) = self.ensure(a);
        self.push_checked(shape, out, Op::Mean { a: na, axes }, ga)
    }

    /// Population variance over `axes` (divide by count).
    pub fn var(&mut self, a: &Tensor, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        Self::check_axes(a.shape(), axes)?;
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        let out = kern::reduce_var(a.values(), a.shape(), &axes);
        let shape = if keep_dims {
            kern::reduced_shape_keep(a.shape(), &axes)
        } else {
            kern::reduced_shape_drop(a.shape(), &axes)
        };
        let (na, ga) = self.ensure(a);
        self.push_checked(shape, out, Op::Var { a: na, axes }, ga)
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = kern::sum4(a.values());
        let (na, ga) = self.ensure(a);
        self.push_checked(vec![], vec![s], Op::SumAll { a: na }, ga)
    }

    // -- spatial -------------------------------------------------------------

    /// 2x2 stride-2 average pooling on [N,C,H,W].
    pub fn avg_pool2(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(CoreError::ShapeMismatch(format!("avg_pool2 on {s:?}")));
        }
        let out = kern::avg_pool2_forward(a.values(), s[0] * s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        let (na, ga) = self.ensure(a);
        self.push_checked(shape, out, Op::AvgPool2 { a: na }, ga)
    }

    /// Nearest-neighbor upsampling by `factor` on [N,C,H,W].
    pub fn upsample_nearest(&mut self, a: &Tensor, factor: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 4 || factor == 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "upsample_nearest x{factor} on {s:?}"
            )));
        }
        let out = kern::upsample_nearest_forward(a.values(), s[0] * s[1], s[2], s[3], factor);
        let shape = vec![s[0], s[1], s[2] * factor, s[3] * factor];
        let (na, ga) = self.ensure(a);
        self.push_checked(shape, out, Op::Upsample { a: na, factor }, ga)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != a.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                a.shape(),
                shape
            )));
        }
        let (na, ga) = self.ensure(a);
        let values = self.vals(na).to_vec();
        self.push_checked(shape.to_vec(), values, Op::Reshape { a: na }, ga)
    }

    // -- structured ops ------------------------------------------------------

    /// Interleave two equally-shaped tensors along a new trailing axis of 2.
    pub fn stack_last2(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "stack_last2 {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = Vec::with_capacity(a.len() * 2);
        for (&x, &y) in a.values().iter().zip(b.values()) {
            out.push(x);
            out.push(y);
        }
        let mut shape = a.shape().to_vec();
        shape.push(2);
        let (na, ga) = self.ensure(a);
        let (nb, gb) = self.ensure(b);
        self.push_checked(shape, out, Op::StackLast2 { a: na, b: nb }, ga || gb)
    }

    /// Per-channel 2→1 linear map: t[n,c] = Σ_j q[n,c,j]·w[c,j].
    pub fn channel_linear2(&mut self, q: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (qs, ws) = (q.shape(), w.shape());
        if qs.len() != 3 || qs[2] != 2 || ws.len() != 2 || ws[1] != 2 || ws[0] != qs[1] {
            return Err(CoreError::ShapeMismatch(format!(
                "channel_linear2 q{qs:?} w{ws:?}"
            )));
        }
        let (n, c) = (qs[0], qs[1]);
        let qv = q.values();
        let wv = w.values();
        let mut out = vec![0.0f64; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let qb = (ni * c + ci) * 2;
                out[ni * c + ci] = qv[qb] * wv[ci * 2] + qv[qb + 1] * wv[ci * 2 + 1];
            }
        }
        let (nq, gq) = self.ensure(q);
        let (nw, gw) = self.ensure(w);
        self.push_checked(vec![n, c], out, Op::ChannelLinear2 { q: nq, w: nw }, gq || gw)
    }

    /// Gradient reversal: identity forward, -factor × gradient backward.
    pub fn grl(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let (na, ga) = self.ensure(a);
        let values = self.vals(na).to_vec();
        self.push_checked(a.shape().to_vec(), values, Op::Grl { a: na, factor }, ga)
    }

    /// Per-pixel channel contraction (1x1 classifier):
    /// y[n,k,h,w] = Σ_c w[k,c]·x[n,c,h,w] + bias[k].
    pub fn pixel_linear(&mut self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (xs, ws, bs) = (x.shape(), w.shape(), bias.shape());
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(CoreError::ShapeMismatch(format!(
                "pixel_linear x{xs:?} w{ws:?} bias{bs:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[0];
        let hw = h * wd;
        let (xv, wv, bv) = (x.values(), w.values(), bias.values());
        let mut out = vec![0.0f64; n * k * hw];
        for ni in 0..n {
            for ki in 0..k {
                let plane = &mut out[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                plane.fill(bv[ki]);
                for ci in 0..c {
                    let wkc = wv[ki * c + ci];
                    let xp = &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for (o, &v) in plane.iter_mut().zip(xp) {
                        *o += wkc * v;
                    }
                }
            }
        }
        let (nx, gx) = self.ensure(x);
        let (nw, gw) = self.ensure(w);
        let (nb, gb) = self.ensure(bias);
        self.push_checked(
            vec![n, k, h, wd],
            out,
            Op::PixelLinear {
                x: nx,
                w: nw,
                bias: nb,
            },
            gx || gw || gb,
        )
    }

    // -- losses --------------------------------------------------------------

    /// Mean over rows of −Σ_k target_k · log_softmax(logits)_k.
    ///
    /// `targets` rows must be distributions (nonnegative, summing to 1).
    pub fn cross_entropy_soft(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let (ls, ts) = (logits.shape(), targets.shape());
        if ls.len() != 2 || ls != ts {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy_soft logits{ls:?} targets{ts:?}"
            )));
        }
        let k = ls[1];
        for (i, row) in targets.values().chunks_exact(k).enumerate() {
            let mut sum = 0.0;
            for &t in row {
                if t < 0.0 {
                    return Err(CoreError::InvalidArgument(format!(
                        "target row {i} has negative entry"
                    )));
                }
                sum += t;
            }
            if math::abs(sum - 1.0) > 1e-6 {
                return Err(CoreError::InvalidArgument(format!(
                    "target row {i} sums to {sum}, expected 1"
                )));
            }
        }
        let n = ls[0] as f64;
        let lsm = self.log_softmax(logits, 1)?;
        let prod = self.mul(&lsm, targets)?;
        let total = self.sum_all(&prod)?;
        self.mul_scalar(&total, -1.0 / n)
    }

    /// Mean over positions of −log_softmax(logits)[label]. `logits` is
    /// [N,K] or [N,K,H,W] with the class axis at 1; labels are row-major
    /// over (n, position).
    pub fn cross_entropy_pixels(&mut self, logits: &Tensor, labels: &[u16]) -> Result<Tensor> {
        let s = logits.shape();
        if s.len() != 2 && s.len() != 4 {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy_pixels on {s:?}"
            )));
        }
        let (n, k) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        let positions = n * hw;
        if labels.len() != positions {
            return Err(CoreError::ShapeMismatch(format!(
                "{} labels for {positions} positions",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| (l as usize) >= k) {
            return Err(CoreError::InvalidArgument(format!(
                "label out of range for {k} classes"
            )));
        }
        let v = logits.values();
        let mut loss = 0.0;
        for ni in 0..n {
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ki in 0..k {
                    m = m.max(v[(ni * k + ki) * hw + p]);
                }
                let mut sum = 0.0;
                for ki in 0..k {
                    sum += math::exp(v[(ni * k + ki) * hw + p] - m);
                }
                let lse = m + math::ln(sum);
                let lab = labels[ni * hw + p] as usize;
                loss += lse - v[(ni * k + lab) * hw + p];
            }
        }
        loss /= positions as f64;
        let (nl, gl) = self.ensure(logits);
        self.push_checked(
            vec![],
            vec![loss],
            Op::CePixels {
                logits: nl,
                labels: Arc::new(labels.to_vec()),
            },
            gl,
        )
    }

    /// Cross-entropy of per-pixel labels against logits that would be
    /// nearest-neighbor upsampled by `factor`. Upsampling duplicates
    /// logits within each block, so the full-resolution loss can be
    /// evaluated on the coarse map directly: one log-sum-exp per coarse
    /// cell, label lookups at fine resolution.
    pub fn cross_entropy_pixels_coarse(
        &mut self,
        logits: &Tensor,
        labels: &[u16],
        factor: usize,
    ) -> Result<Tensor> {
        if factor == 1 {
            return self.cross_entropy_pixels(logits, labels);
        }
        let s = logits.shape();
        if s.len() != 4 || factor == 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy_pixels_coarse on {s:?} with factor {factor}"
            )));
        }
        let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
        let (fh, fw) = (h * factor, w * factor);
        let positions = n * fh * fw;
        if labels.len() != positions {
            return Err(CoreError::ShapeMismatch(format!(
                "{} labels for {positions} fine positions",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| (l as usize) >= k) {
            return Err(CoreError::InvalidArgument(format!(
                "label out of range for {k} classes"
            )));
        }
        let v = logits.values();
        let hw = h * w;
        let mut loss = 0.0;
        for ni in 0..n {
            for cy in 0..h {
                for cx in 0..w {
                    let p = cy * w + cx;
                    let mut m = f64::NEG_INFINITY;
                    for ki in 0..k {
                        m = m.max(v[(ni * k + ki) * hw + p]);
                    }
                    let mut sum = 0.0;
                    for ki in 0..k {
                        sum += math::exp(v[(ni * k + ki) * hw + p] - m);
                    }
                    let lse = m + math::ln(sum);
                    for fy in cy * factor..(cy + 1) * factor {
                        for fx in cx * factor..(cx + 1) * factor {
                            let lab = labels[ni * fh * fw + fy * fw + fx] as usize;
                            loss += lse - v[(ni * k + lab) * hw + p];
                        }
                    }
                }
            }
        }
        loss /= positions as f64;
        let (nl, gl) = self.ensure(logits);
        self.push_checked(
            vec![],
            vec![loss],
            Op::CePixelsCoarse {
                logits: nl,
                labels: Arc::new(labels.to_vec()),
                factor,
            },
            gl,
        )
    }

    /// Mean Shannon entropy over positions; `probs` is [N,K] or [N,K,H,W]
    /// with the class axis at 1. 0·log 0 := 0.
    pub fn prediction_entropy(&mut self, probs: &Tensor) -> Result<Tensor> {
        let s = probs.shape();
        if s.len() != 2 && s.len() != 4 {
            return Err(CoreError::ShapeMismatch(format!(
                "prediction_entropy on {s:?}"
            )));
        }
        let (n, k) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        let positions = n * hw;
        let v = probs.values();
        // validate distributions
        for ni in 0..n {
            for p in 0..hw {
                let mut sum = 0.0;
                for ki in 0..k {
                    let x = v[(ni * k + ki) * hw + p];
                    if x < 0.0 {
                        return Err(CoreError::InvalidArgument(String::from(
                            "negative probability",
                        )));
                    }
                    sum += x;
                }
                if math::abs(sum - 1.0) > 1e-6 {
                    return Err(CoreError::InvalidArgument(format!(
                        "probabilities sum to {sum}, expected 1"
                    )));
                }
            }
        }
        let mut h = 0.0;
        for &p in v {
            if p > 0.0 {
                h -= p * math::ln(p);
            }
        }
        h /= positions as f64;
        let (np, gp) = self.ensure(probs);
        self.push_checked(vec![], vec![h], Op::Entropy { probs: np }, gp)
    }

    /// Biased RBF-MMD² between row sets x[n,C] and y[m,C] with kernel
    /// exp(−gamma·‖a−b‖²). `gamma` is a detached constant.
    pub fn rbf_mmd2(&mut self, x: &Tensor, y: &Tensor, gamma: f64) -> Result<Tensor> {
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
            return Err(CoreError::ShapeMismatch(format!("rbf_mmd2 x{xs:?} y{ys:?}")));
        }
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(CoreError::InvalidArgument(format!("gamma {gamma}")));
        }
        let (n, m, c) = (xs[0], ys[0], xs[1]);
        let xv = x.values();
        let yv = y.values();
        let kxx = mean_kernel(xv, xv, n, n, c, gamma);
        let kyy = mean_kernel(yv, yv, m, m, c, gamma);
        let kxy = mean_kernel(xv, yv, n, m, c, gamma);
        let out = kxx + kyy - 2.0 * kxy;
        let (nx, gx) = self.ensure(x);
        let (ny, gy) = self.ensure(y);
        self.push_checked(
            vec![],
            vec![out],
            Op::RbfMmd2 {
                x: nx,
                y: ny,
                gamma,
            },
            gx || gy,
        )
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the tape (one backward per
    /// forward). Returns gradients for every leaf that requires them;
    /// intermediate gradients are dropped as soon as they are propagated.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients> {
        let r = loss.tape_ref.ok_or_else(|| {
            CoreError::InvalidArgument(String::from("loss is not on a tape"))
        })?;
        if r.tape_id != self.id {
            return Err(CoreError::InvalidArgument(String::from(
                "loss belongs to a different tape",
            )));
        }
        if loss.len() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[r.node.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let mut shapes = Vec::with_capacity(n);
        let mut keep: Vec<Option<Vec<f64>>> = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            shapes.push(node.shape.clone());
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                keep[i] = grads[i].take();
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            entries: keep,
            shapes,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        let accum = |grads: &mut Vec<Option<Vec<f64>>>, id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let a_shape = self.shape_of(*a);
                let b_shape = self.shape_of(*b);
                let plan = kern::broadcast_plan(a_shape, b_shape).expect("validated at record");
                let av = self.vals(*a);
                let bv = self.vals(*b);
                let b_len = bv.len();
                match kind {
                    BinKind::Add => {
                        accum(grads, *a, g.to_vec());
                        accum(grads, *b, kern::reduce_to_operand(g, a_shape, b_len, &plan));
                    }
                    BinKind::Sub => {
                        accum(grads, *a, g.to_vec());
                        let mut gb = kern::reduce_to_operand(g, a_shape, b_len, &plan);
                        for v in gb.iter_mut() {
                            *v = -*v;
                        }
                        accum(grads, *b, gb);
                    }
                    BinKind::Mul => {
                        let ga = kern::binary_broadcast(g, a_shape, bv, &plan, |x, y| x * y);
                        accum(grads, *a, ga);
                        let gxa: Vec<f64> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                        accum(
                            grads,
                            *b,
                            kern::reduce_to_operand(&gxa, a_shape, b_len, &plan),
                        );
                    }
                    BinKind::Div => {
                        let ga = kern::binary_broadcast(g, a_shape, bv, &plan, |x, y| x / y);
                        accum(grads, *a, ga);
                        // d/db (a/b) = -a/b² = -y/b with y the forward output
                        let yv = &self.nodes[i].values;
                        let gy: Vec<f64> = g.iter().zip(yv.iter()).map(|(&x, &y)| x * y).collect();
                        let mut gb = kern::binary_broadcast(&gy, a_shape, bv, &plan, |x, y| x / y);
                        for v in gb.iter_mut() {
                            *v = -*v;
                        }
                        accum(
                            grads,
                            *b,
                            kern::reduce_to_operand(&gb, a_shape, b_len, &plan),
                        );
                    }
                }
            }
            Op::AddScalar { a } => accum(grads, *a, g.to_vec()),
            Op::MulScalar { a, c } => {
                accum(grads, *a, g.iter().map(|&x| x * c).collect());
            }
            Op::Sqrt { a } => {
                let yv = &self.nodes[i].values;
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(yv.iter())
                    .map(|(&gi, &yi)| gi / (2.0 * yi))
                    .collect();
                accum(grads, *a, contrib);
            }
            Op::Relu { a } => {
                let av = self.vals(*a);
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                accum(grads, *a, contrib);
            }
            Op::Sigmoid { a } => {
                let yv = &self.nodes[i].values;
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(yv.iter())
                    .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                    .collect();
                accum(grads, *a, contrib);
            }
            Op::Softplus { a } => {
                let av = self.vals(*a);
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(&gi, &xi)| gi * math::sigmoid(xi))
                    .collect();
                accum(grads, *a, contrib);
            }
            Op::LogSoftmax { a, axis } => {
                let yv = &self.nodes[i].values;
                let mut contrib = vec![0.0f64; g.len()];
                kern::for_each_axis_group(&node.shape, *axis, |start, len, stride| {
                    let mut gsum = 0.0;
                    for j in 0..len {
                        gsum += g[start + j * stride];
                    }
                    for j in 0..len {
                        let idx = start + j * stride;
                        contrib[idx] = g[idx] - math::exp(yv[idx]) * gsum;
                    }
                });
                accum(grads, *a, contrib);
            }
            Op::Softmax { a, axis } => {
                let pv = &self.nodes[i].values;
                let mut contrib = vec![0.0f64; g.len()];
                kern::for_each_axis_group(&node.shape, *axis, |start, len, stride| {
                    let mut dot = 0.0;
                    for j in 0..len {
                        let idx = start + j * stride;
                        dot += g[idx] * pv[idx];
                    }
                    for j in 0..len {
                        let idx = start + j * stride;
                        contrib[idx] = pv[idx] * (g[idx] - dot);
                    }
                });
                accum(grads, *a, contrib);
            }
            Op::Linear { x, w, bias } => {
                let xs = self.shape_of(*x);
                let ws = self.shape_of(*w);
                let (n, din, dout) = (xs[0], xs[1], ws[1]);
                let (gx, gw, gb) =
                    kern::linear_backward(g, self.vals(*x), self.vals(*w), n, din, dout);
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                accum(grads, *bias, gb);
            }
            Op::Conv2d { x, k, bias } => {
                let xs = self.shape_of(*x);
                let ks = self.shape_of(*k);
                let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = ks[0];
                let gx = kern::conv2d_backward_input(g, self.vals(*k), n, cin, cout, h, w);
                accum(grads, *x, gx);
                let (gk, gb) = kern::conv2d_backward_kernel(g, self.vals(*x), n, cin, cout, h, w);
                accum(grads, *k, gk);
                accum(grads, *bias, gb);
            }
            Op::Mean { a, axes } => {
                let a_shape = self.shape_of(*a);
                let count = kern::reduce_count(a_shape, axes) as f64;
                let mut contrib = vec![0.0f64; self.vals(*a).len()];
                kern::for_each_mapped(a_shape, axes, |flat, oi| {
                    contrib[flat] = g[oi] / count;
                });
                accum(grads, *a, contrib);
            }
            Op::Var { a, axes } => {
                let a_shape = self.shape_of(*a);
                let av = self.vals(*a);
                let count = kern::reduce_count(a_shape, axes) as f64;
                let mean = kern::reduce_mean(av, a_shape, axes);
                let mut contrib = vec![0.0f64; av.len()];
                kern::for_each_mapped(a_shape, axes, |flat, oi| {
                    contrib[flat] = g[oi] * 2.0 * (av[flat] - mean[oi]) / count;
                });
                accum(grads, *a, contrib);
            }
            Op::SumAll { a } => {
                accum(grads, *a, vec![g[0]; self.vals(*a).len()]);
            }
            Op::AvgPool2 { a } => {
                let s = self.shape_of(*a);
                accum(grads, *a, kern::avg_pool2_backward(g, s[0] * s[1], s[2], s[3]));
            }
            Op::Upsample { a, factor } => {
                let s = self.shape_of(*a);
                accum(
                    grads,
                    *a,
                    kern::upsample_nearest_backward(g, s[0] * s[1], s[2], s[3], *factor),
                );
            }
            Op::Reshape { a } => accum(grads, *a, g.to_vec()),
            Op::StackLast2 { a, b } => {
                let half = g.len() / 2;
                let mut ga = Vec::with_capacity(half);
                let mut gb = Vec::with_capacity(half);
                for pair in g.chunks_exact(2) {
                    ga.push(pair[0]);
                    gb.push(pair[1]);
                }
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::ChannelLinear2 { q, w } => {
                let qs = self.shape_of(*q);
                let (n, c) = (qs[0], qs[1]);
                let qv = self.vals(*q);
                let wv = self.vals(*w);
                let mut gq = vec![0.0f64; n * c * 2];
                let mut gw = vec![0.0f64; c * 2];
                for ni in 0..n {
                    for ci in 0..c {
                        let go = g[ni * c + ci];
                        let qb = (ni * c + ci) * 2;
                        gq[qb] = go * wv[ci * 2];
                        gq[qb + 1] = go * wv[ci * 2 + 1];
                        gw[ci * 2] += go * qv[qb];
                        gw[ci * 2 + 1] += go * qv[qb + 1];
                    }
                }
                accum(grads, *q, gq);
                accum(grads, *w, gw);
            }
            Op::Grl { a, factor } => {
                accum(grads, *a, g.iter().map(|&x| -factor * x).collect());
            }
            Op::PixelLinear { x, w, bias } => {
                let xs = self.shape_of(*x);
                let ws = self.shape_of(*w);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let k = ws[0];
                let xv = self.vals(*x);
                let wv = self.vals(*w);
                let mut gx = vec![0.0f64; xv.len()];
                let mut gw = vec![0.0f64; wv.len()];
                let mut gb = vec![0.0f64; k];
                for ni in 0..n {
                    for ki in 0..k {
                        let gp = &g[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                        gb[ki] += kern::sum4(gp);
                        for ci in 0..c {
                            let wkc = wv[ki * c + ci];
                            let gxp = &mut gx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for (o, &gv) in gxp.iter_mut().zip(gp) {
                                *o += wkc * gv;
                            }
                            let xp = &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            gw[ki * c + ci] += kern::dot4(gp, xp);
                        }
                    }
                }
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                accum(grads, *bias, gb);
            }
            Op::CePixels { logits, labels } => {
                let s = self.shape_of(*logits);
                let (n, k) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let positions = (n * hw) as f64;
                let v = self.vals(*logits);
                let mut contrib = vec![0.0f64; v.len()];
                let gl = g[0];
                for ni in 0..n {
                    for p in 0..hw {
                        let mut m = f64::NEG_INFINITY;
                        for ki in 0..k {
                            m = m.max(v[(ni * k + ki) * hw + p]);
                        }
                        let mut sum = 0.0;
                        for ki in 0..k {
                            sum += math::exp(v[(ni * k + ki) * hw + p] - m);
                        }
                        let lab = labels[ni * hw + p] as usize;
                        for ki in 0..k {
                            let idx = (ni * k + ki) * hw + p;
                            let soft = math::exp(v[idx] - m) / sum;
                            let onehot = if ki == lab { 1.0 } else { 0.0 };
                            contrib[idx] = gl * (soft - onehot) / positions;
                        }
                    }
                }
                accum(grads, *logits, contrib);
            }
            Op::CePixelsCoarse {
                logits,
                labels,
                factor,
            } => {
                let s = self.shape_of(*logits);
                let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
                let (fh, fw) = (h * factor, w * factor);
                let positions = (n * fh * fw) as f64;
                let block = (factor * factor) as f64;
                let v = self.vals(*logits);
                let hw = h * w;
                let mut contrib = vec![0.0f64; v.len()];
                let gl = g[0];
                for ni in 0..n {
                    for cy in 0..h {
                        for cx in 0..w {
                            let p = cy * w + cx;
                            let mut m = f64::NEG_INFINITY;
                            for ki in 0..k {
                                m = m.max(v[(ni * k + ki) * hw + p]);
                            }
                            let mut sum = 0.0;
                            for ki in 0..k {
                                sum += math::exp(v[(ni * k + ki) * hw + p] - m);
                            }
                            let mut label_counts = [0usize; 16];
                            let mut overflow: Vec<usize> = Vec::new();
                            if k > 16 {
                                overflow = vec![0usize; k];
                            }
                            for fy in cy * factor..(cy + 1) * factor {
                                for fx in cx * factor..(cx + 1) * factor {
                                    let lab = labels[ni * fh * fw + fy * fw + fx] as usize;
                                    if k > 16 {
                                        overflow[lab] += 1;
                                    } else {
                                        label_counts[lab] += 1;
                                    }
                                }
                            }
                            for ki in 0..k {
                                let idx = (ni * k + ki) * hw + p;
                                let soft = math::exp(v[idx] - m) / sum;
                                let cnt = if k > 16 {
                                    overflow[ki]
                                } else {
                                    label_counts[ki]
                                } as f64;
                                contrib[idx] = gl * (block * soft - cnt) / positions;
                            }
                        }
                    }
                }
                accum(grads, *logits, contrib);
            }
            Op::Entropy { probs } => {
                let s = self.shape_of(*probs);
                let hw: usize = s[2..].iter().product();
                let positions = (s[0] * hw) as f64;
                let pv = self.vals(*probs);
                let gl = g[0];
                let contrib: Vec<f64> = pv
                    .iter()
                    .map(|&p| {
                        if p > 0.0 {
                            -gl * (math::ln(p) + 1.0) / positions
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accum(grads, *probs, contrib);
            }
            Op::RbfMmd2 { x, y, gamma } => {
                let xs = self.shape_of(*x);
                let ys = self.shape_of(*y);
                let (n, m, c) = (xs[0], ys[0], xs[1]);
                let xv = self.vals(*x);
                let yv = self.vals(*y);
                let gl = g[0];
                let (gx, gy) = mmd_backward(xv, yv, n, m, c, *gamma, gl);
                accum(grads, *x, gx);
                accum(grads, *y, gy);
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn mean_kernel(a: &[f64], b: &[f64], n: usize, m: usize, c: usize, gamma: f64) -> f64 {
    // Terms are summed in sorted order so the result depends only on the
    // multiset of kernel values. This makes MMD²(A,B) == MMD²(B,A) and
    // MMD²(X,X) == 0 hold bit-exactly, not just up to rounding.
    let mut terms = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            terms.push(math::exp(
                -gamma * sq_dist(&a[i * c..(i + 1) * c], &b[j * c..(j + 1) * c]),
            ));
        }
    }
    terms.sort_unstable_by(f64::total_cmp);
    let mut s = 0.0;
    for t in terms {
        s += t;
    }
    s / (n * m) as f64
}

fn mmd_backward(
    xv: &[f64],
    yv: &[f64],
    n: usize,
    m: usize,
    c: usize,
    gamma: f64,
    g: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0f64; n * c];
    let mut gy = vec![0.0f64; m * c];
    let nn = (n * n) as f64;
    let mm = (m * m) as f64;
    let nm = (n * m) as f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = math::exp(-gamma * sq_dist(&xv[i * c..(i + 1) * c], &xv[j * c..(j + 1) * c]));
            let coef = -g * 4.0 * gamma * k / nn;
            for d in 0..c {
                gx[i * c + d] += coef * (xv[i * c + d] - xv[j * c + d]);
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let k = math::exp(-gamma * sq_dist(&yv[i * c..(i + 1) * c], &yv[j * c..(j + 1) * c]));
            let coef = -g * 4.0 * gamma * k / mm;
            for d in 0..c {
                gy[i * c + d] += coef * (yv[i * c + d] - yv[j * c + d]);
            }
        }
    }
    for i in 0..n {
        for j in 0..m {
            let k = math::exp(-gamma * sq_dist(&xv[i * c..(i + 1) * c], &yv[j * c..(j + 1) * c]));
            let coef = g * 4.0 * gamma * k / nm;
            for d in 0..c {
                gx[i * c + d] += coef * (xv[i * c + d] - yv[j * c + d]);
                gy[j * c + d] += coef * (yv[j * c + d] - xv[i * c + d]);
            }
        }
    }
    (gx, gy)
}

/// Gradients produced by one backward pass, keyed by leaf node.
pub struct Gradients {
    tape_id: u64,
    entries: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t` (a leaf registered with
    /// `requires_grad`), if any was accumulated.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let r = t.tape_ref?;
        if r.tape_id != self.tape_id {
            return None;
        }
        self.entries[r.node.0].as_ref().map(|g| {
            Tensor::from_parts(
                self.shapes[r.node.0].clone(),
                Arc::new(g.clone()),
                false,
                None,
            )
        })
    }

    /// Like [`Gradients::get`], but unreachable leaves yield zeros.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_mul_examples() {
        let mut tape = GradientTape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(tape.add(&a, &b).unwrap().values(), &[4.0, 6.0]);
        let ones = t(&[2], &[1.0, 1.0]);
        assert_eq!(tape.mul(&a, &ones).unwrap().values(), a.values());
    }

    #[test]
    fn division_near_zero_rejected() {
        let mut tape = GradientTape::new();
        let a = t(&[1], &[1.0]);
        let b = t(&[1], &[1e-305]);
        assert!(matches!(
            tape.div(&a, &b),
            Err(CoreError::InvalidArgument(_))
        ));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = GradientTape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().values(), &[1.0; 4]);
    }

    #[test]
    fn zero_times_x_has_zero_grad() {
        let mut tape = GradientTape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 5.0]), true);
        let z = tape.mul_scalar(&x, 0.0).unwrap();
        let loss = tape.sum_all(&z).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().values(), &[0.0; 3]);
    }

    #[test]
    fn grad_of_sum_of_products_is_other_factor() {
        let mut tape = GradientTape::new();
        let a = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = t(&[3], &[5.0, -1.0, 0.5]);
        let p = tape.mul(&a, &b).unwrap();
        let loss = tape.sum_all(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap().values(), b.values());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = GradientTape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul_scalar(&x, 2.0).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn grl_forward_identity_backward_negated() {
        let mut tape = GradientTape::new();
        let x = tape.leaf(&t(&[1], &[3.0]), true);
        let r = tape.grl(&x, 1.0).unwrap();
        assert_eq!(r.values(), x.values());
        // g(x) = x², so d/dx g(grl(x)) = -2x = -6
        let sq = tape.mul(&r, &r).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().values(), &[-6.0]);
    }

    #[test]
    fn grl_factor_zero_kills_gradient() {
        let mut tape = GradientTape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let r = tape.grl(&x, 0.0).unwrap();
        let loss = tape.sum_all(&r).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_identity() {
        let mut tape = GradientTape::new();
        let x = t(&[1, 2], &[1.0, 0.0]);
        let w = t(&[2, 1], &[2.0, 3.0]);
        let b = t(&[1], &[1.0]);
        let y = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(y.values(), &[3.0]);
        let wid = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b0 = t(&[2], &[0.0, 0.0]);
        let x2 = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y2 = tape.linear(&x2, &wid, &b0).unwrap();
        assert_eq!(y2.values(), x2.values());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = GradientTape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let p = tape.softmax(&x, 1).unwrap();
        for row in p.values().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_soft_uniform_logits() {
        let mut tape = GradientTape::new();
        let logits = t(&[2, 3], &[0.5; 6]);
        let targets = t(&[2, 3], &[1.0, 0.0, 0.0, 0.2, 0.3, 0.5]);
        let ce = tape.cross_entropy_soft(&logits, &targets).unwrap();
        assert!((ce.item().unwrap() - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_soft_saturated() {
        let mut tape = GradientTape::new();
        let logits = t(&[1, 3], &[50.0, 0.0, 0.0]);
        let targets = t(&[1, 3], &[1.0, 0.0, 0.0]);
        let ce = tape.cross_entropy_soft(&logits, &targets).unwrap();
        assert!(ce.item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_soft_rejects_bad_targets() {
        let mut tape = GradientTape::new();
        let logits = t(&[1, 2], &[0.0, 0.0]);
        assert!(tape
            .cross_entropy_soft(&logits, &t(&[1, 2], &[0.7, 0.7]))
            .is_err());
        assert!(tape
            .cross_entropy_soft(&logits, &t(&[1, 2], &[1.5, -0.5]))
            .is_err());
    }

    #[test]
    fn entropy_uniform_and_onehot() {
        let mut tape = GradientTape::new();
        let uniform = t(&[1, 3], &[1.0 / 3.0; 3]);
        let h = tape.prediction_entropy(&uniform).unwrap();
        assert!((h.item().unwrap() - (3.0f64).ln()).abs() < 1e-12);
        let onehot = t(&[1, 3], &[1.0, 0.0, 0.0]);
        let h0 = tape.prediction_entropy(&onehot).unwrap();
        assert_eq!(h0.item().unwrap(), 0.0);
    }

    #[test]
    fn coarse_pixel_ce_matches_upsampled_path() {
        let mut rng = crate::rng::RngStream::new(41);
        let (n, k, h, w, f) = (2usize, 3usize, 2usize, 2usize, 2usize);
        let logits = t(
            &[n, k, h, w],
            &(0..n * k * h * w).map(|_| rng.normal()).collect::<Vec<_>>(),
        );
        let labels: Vec<u16> = (0..n * h * f * w * f)
            .map(|_| rng.below(k as u64) as u16)
            .collect();
        let mut tape = GradientTape::new();
        let coarse = tape
            .cross_entropy_pixels_coarse(&logits, &labels, f)
            .unwrap()
            .item()
            .unwrap();
        let up = tape.upsample_nearest(&logits, f).unwrap();
        let full = tape
            .cross_entropy_pixels(&up, &labels)
            .unwrap()
            .item()
            .unwrap();
        assert!((coarse - full).abs() < 1e-12, "{coarse} vs {full}");
    }

    #[test]
    fn coarse_pixel_ce_gradient_check() {
        let mut rng = crate::rng::RngStream::new(43);
        let (n, k, h, w, f) = (2usize, 3usize, 2usize, 2usize, 2usize);
        let x = t(
            &[n, k, h, w],
            &(0..n * k * h * w).map(|_| rng.normal()).collect::<Vec<_>>(),
        );
        let labels: Vec<u16> = (0..n * h * f * w * f)
            .map(|_| rng.below(k as u64) as u16)
            .collect();
        let err = crate::gradcheck::grad_check(
            move |tape, x| tape.cross_entropy_pixels_coarse(x, &labels, f),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn mmd_self_is_zero_and_symmetric() {
        let mut tape = GradientTape::new();
        let x = t(&[3, 2], &[0.1, 0.2, -0.5, 1.0, 2.0, -0.3]);
        let y = t(&[2, 2], &[1.0, 1.0, -1.0, 0.5]);
        let self_mmd = tape.rbf_mmd2(&x, &x, 0.7).unwrap().item().unwrap();
        assert!(self_mmd.abs() < 1e-12);
        let ab = tape.rbf_mmd2(&x, &y, 0.7).unwrap().item().unwrap();
        let ba = tape.rbf_mmd2(&y, &x, 0.7).unwrap().item().unwrap();
        assert_eq!(ab, ba);
        assert!(ab >= 0.0);
    }

    #[test]
    fn mean_and_var_reduce() {
        let mut tape = GradientTape::new();
        let x = t(&[1, 2], &[1.0, 3.0]);
        let m = tape.mean(&x, &[1], false).unwrap();
        assert_eq!(m.values(), &[2.0]);
        let v = tape.var(&x, &[1], false).unwrap();
        assert_eq!(v.values(), &[1.0]);
    }

    #[test]
    fn op_names_are_recorded() {
        let mut tape = GradientTape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let _ = tape.mul_scalar(&x, 2.0).unwrap();
        assert_eq!(tape.op_names(), vec!["leaf", "mul_scalar"]);
    }

    #[test]
    fn tensors_from_other_tapes_become_constants() {
        let mut t1 = GradientTape::new();
        let x = t1.leaf(&t(&[1], &[2.0]), true);
        let y = t1.mul_scalar(&x, 3.0).unwrap();
        // use y on another tape: treated as constant there
        let mut t2 = GradientTape::new();
        let z = t2.mul_scalar(&y, 2.0).unwrap();
        assert_eq!(z.values(), &[12.0]);
        assert!(!z.requires_grad());
    }
}
