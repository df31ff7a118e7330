//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] owns every value computed during one forward pass. Nodes are
//! appended in execution order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    Upsample,
    Relu,
    MaxPool,
    Add,
    Mul,
    Abs,
    Scale,
    Sum,
    SoftmaxCrossEntropy,
    SmoothL1,
    ToRows,
    SelectRows,
}

/// What a node is: an external input (activation), a trainable parameter, or an op result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    Input,
    Param,
    Op(OpKind),
}

/// Per-op-kind tally of executed forward ops.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    counts: BTreeMap<OpKind, u64>,
}

impl OpCounter {
    fn bump(&mut self, kind: OpKind) {
        *self.counts.entry(kind).or_default() += 1;
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
        bias: bool,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Abs {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        norm: f64,
        softmax: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        norm: f64,
    },
    ToRows {
        levels: Vec<Var>,
        group: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Upsample { x, .. }
            | Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::Abs { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::SelectRows { x, .. } => vec![*x],
            Op::Add { a, b, .. } | Op::Mul { a, b } => vec![*a, *b],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, target, .. } => vec![*pred, *target],
            Op::ToRows { levels, .. } => levels.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    role: NodeRole,
    requires_grad: bool,
    grad: Option<Tensor>,
    flops: u64,
}

/// Read-only view of one recorded node, used by cost and memory analyses.
#[derive(Clone, Debug)]
pub struct NodeInfo<'a> {
    pub var: Var,
    pub role: NodeRole,
    pub inputs: Vec<Var>,
    pub shape: &'a [usize],
    pub flops: u64,
}

/// Tape of one forward pass plus the op tally.
///
/// Flop conventions (per executed op): conv = `2·Cout·Cin·kH·kW·H'·W' + Cout·H'·W'`
/// per image (the second term is the bias add); add, mul, abs, scale and relu = 1
/// per output element; bilinear upsample = 8 per output element; 2×2 max pool = 3
/// per output element (comparisons); sum = 1 per input element; row gathers = 0.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    counter: OpCounter,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records what `backward` needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: OpCounter::default(),
            track: true,
        }
    }

    /// A graph with gradient tracking disabled.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn op_counter(&self) -> &OpCounter {
        &self.counter
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

    /// Gradient of the last `backward` loss with respect to a leaf, or `None` when the
    /// leaf is not reachable from that loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Softmax probabilities saved by a cross-entropy node (tracking graphs only).
    pub fn saved_softmax(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxCe { softmax, .. } if !softmax.is_empty() => Some(softmax),
            _ => None,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| NodeInfo {
            var: Var(i),
            role: n.role,
            inputs: n.op.inputs(),
            shape: n.value.shape(),
            flops: n.flops,
        })
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, NodeRole::Input, false)
    }

    /// Trainable leaf; receives a gradient when the graph tracks.
    pub fn param(&mut self, value: Tensor) -> Var {
        let track = self.track;
        self.push_leaf(value, NodeRole::Param, track)
    }

    /// Input leaf that does receive gradients (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let track = self.track;
        self.push_leaf(value, NodeRole::Input, track)
    }

    fn push_leaf(&mut self, value: Tensor, role: NodeRole, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            role,
            requires_grad,
            grad: None,
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, kind: OpKind, value: Tensor, op: Op, flops: u64) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("{kind:?}")));
        }
        let requires_grad = self.track && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.counter.bump(kind);
        self.nodes.push(Node {
            value,
            op,
            role: NodeRole::Op(kind),
            requires_grad,
            grad: None,
            flops,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of `x [N,Cin,H,W]` with `weight [Cout,Cin,kH,kW]` plus `bias [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(TensorError::Dimension(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(TensorError::Dimension(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                self.shape(bias)
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d: stride must be >= 1".into()));
        }
        let ho = out_extent(h, kh, stride, pad)?;
        let wo = out_extent(w, kw, stride, pad)?;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let flops = (n * (2 * cout * cin * kh * kw * ho * wo + cout * ho * wo)) as u64;
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        self.push_op(
            OpKind::Conv2d,
            value,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
            },
            flops,
        )
    }

    /// Half-pixel-center bilinear upsampling by an integer factor, edges clamped.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::Config("upsample factor must be >= 1".into()));
        }
        let dims = self.value(x).dims4()?;
        let [n, c, h, w] = dims;
        let out = kernels::upsample_forward(dims, factor, self.value(x).data());
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        let flops = 8 * value.numel() as u64;
        self.push_op(OpKind::Upsample, value, Op::Upsample { x, factor }, flops)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let flops = value.numel() as u64;
        self.push_op(OpKind::Relu, value, Op::Relu { x }, flops)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let [n, c, h, w] = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Dimension(format!(
                "maxpool2x2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool_forward(dims, self.value(x).data());
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let flops = 3 * value.numel() as u64;
        let argmax = if self.track { argmax } else { Vec::new() };
        self.push_op(OpKind::MaxPool, value, Op::MaxPool { x, argmax }, flops)
    }

    /// Elementwise sum of equal shapes, or `[N,C,H,W] + [C]` broadcasting the second
    /// operand over channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bias = if sa == sb {
            false
        } else if sa.len() == 4 && sb == [sa[1]] {
            true
        } else {
            return Err(TensorError::Dimension(format!("add: shapes {sa:?} and {sb:?} differ")));
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = if bias {
            let [_, c, h, w] = av.dims4()?;
            av.data().iter().enumerate().map(|(i, &v)| v + bv[(i / (h * w)) % c]).collect()
        } else {
            av.data().iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let flops = value.numel() as u64;
        self.push_op(OpKind::Add, value, Op::Add { a, b, bias }, flops)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let flops = value.numel() as u64;
        self.push_op(OpKind::Mul, value, Op::Mul { a, b }, flops)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v.abs()).collect())?;
        let flops = value.numel() as u64;
        self.push_op(OpKind::Abs, value, Op::Abs { x }, flops)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * factor).collect())?;
        let flops = value.numel() as u64;
        self.push_op(OpKind::Scale, value, Op::Scale { x, factor }, flops)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let flops = src.numel() as u64;
        let value = Tensor::scalar(src.data().iter().sum());
        self.push_op(OpKind::Sum, value, Op::Sum { x }, flops)
    }

    /// Mean negative log-softmax over the rows of `logits [M,C]` whose target is not
    /// `ignore_label`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_label: usize) -> Result<Var> {
        self.softmax_cross_entropy_with_norm(logits, targets, ignore_label, None)
    }

    /// Cross-entropy summed over kept rows and divided by `norm` (`None` = number of kept rows).
    pub fn softmax_cross_entropy_with_norm(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_label: usize,
        norm: Option<f64>,
    ) -> Result<Var> {
        let [m, c] = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(TensorError::Dimension(format!(
                "cross entropy: {m} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c && t != ignore_label) {
            return Err(TensorError::Contract(format!("cross entropy: label {bad} outside [0, {c})")));
        }
        let kept = targets.iter().filter(|&&t| t != ignore_label).count();
        if kept == 0 {
            return Err(TensorError::EmptyReduction("cross entropy: every row is ignored".into()));
        }
        let norm = norm.unwrap_or(kept as f64);
        if !(norm > 0.0) {
            return Err(TensorError::Config(format!("cross entropy: bad normalizer {norm}")));
        }
        let data = self.value(logits).data();
        let mut softmax = if self.track { vec![0.0; m * c] } else { Vec::new() };
        let mut total = 0.0;
        for (i, (row, &t)) in data.chunks_exact(c).zip(targets).enumerate() {
            if t == ignore_label && !self.track {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            if self.track {
                for (s, &v) in softmax[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *s = (v - max).exp() / denom;
                }
            }
            if t != ignore_label {
                total += max + denom.ln() - row[t];
            }
        }
        let value = Tensor::scalar(total / norm);
        let flops = 4 * (m * c) as u64;
        self.push_op(
            OpKind::SoftmaxCrossEntropy,
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_label,
                norm,
                softmax,
            },
            flops,
        )
    }

    /// Smooth-L1 (Huber, δ = 1) summed over all elements and divided by the row count.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let rows = self.shape(pred).first().copied().unwrap_or(0);
        self.smooth_l1_with_norm(pred, target, rows as f64)
    }

    pub fn smooth_l1_with_norm(&mut self, pred: Var, target: Var, norm: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::Dimension(format!(
                "smooth_l1: shapes {:?} and {:?} differ",
                self.shape(pred),
                self.shape(target)
            )));
        }
        self.value(pred).dims2()?;
        if !(norm > 0.0) {
            return Err(TensorError::EmptyReduction("smooth_l1 over zero rows".into()));
        }
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        let flops = 3 * self.value(pred).numel() as u64;
        self.push_op(
            OpKind::SmoothL1,
            Tensor::scalar(total / norm),
            Op::SmoothL1 { pred, target, norm },
            flops,
        )
    }

    /// Flattens per-level maps `[N, G·K, H_l, W_l]` into rows `[N·Σ H_l·W_l·G, K]`,
    /// ordered image-major, then level, then cell row-major, then group (channel
    /// block `g` holds columns `g·K .. (g+1)·K`).
    pub fn to_rows(&mut self, levels: &[Var], group: usize) -> Result<Var> {
        if levels.is_empty() || group == 0 {
            return Err(TensorError::Config("to_rows needs at least one level and group >= 1".into()));
        }
        let mut dims = Vec::with_capacity(levels.len());
        for &l in levels {
            dims.push(self.value(l).dims4()?);
        }
        let n = dims[0][0];
        let ch = dims[0][1];
        if ch % group != 0 {
            return Err(TensorError::Dimension(format!(
                "to_rows: {ch} channels not divisible into {group} groups"
            )));
        }
        let k = ch / group;
        if let Some(d) = dims.iter().find(|d| d[0] != n || d[1] != ch) {
            return Err(TensorError::Dimension(format!(
                "to_rows: level shape {d:?} inconsistent with N={n}, C={ch}"
            )));
        }
        let rows_per_image: usize = dims.iter().map(|d| d[2] * d[3] * group).sum();
        let mut out = Vec::with_capacity(n * rows_per_image * k);
        for img in 0..n {
            for (&l, d) in levels.iter().zip(&dims) {
                let hw = d[2] * d[3];
                let src = &self.value(l).data()[img * ch * hw..(img + 1) * ch * hw];
                for cell in 0..hw {
                    for g in 0..group {
                        for kk in 0..k {
                            out.push(src[(g * k + kk) * hw + cell]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n * rows_per_image, k], out)?;
        self.push_op(
            OpKind::ToRows,
            value,
            Op::ToRows {
                levels: levels.to_vec(),
                group,
            },
            0,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let [m, k] = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(TensorError::EmptyReduction("select_rows with no rows".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::Dimension(format!("select_rows: row {r} out of {m}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            out.extend_from_slice(&src[r * k..(r + 1) * k]);
        }
        let value = Tensor::new(vec![rows.len(), k], out)?;
        self.push_op(OpKind::SelectRows, value, Op::SelectRows { x, rows: rows.to_vec() }, 0)
    }

    /// Reverse sweep from a scalar loss; afterwards [`Graph::grad`] returns the summed
    /// gradient for every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.track {
            return Err(TensorError::Contract("backward on an inference graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                let value = Tensor::new(node.value.shape().to_vec(), up)?;
                self.nodes[i].grad = Some(value);
                continue;
            }
            for (input, g) in self.local_grads(i, &up)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its upstream gradient.
    fn local_grads(&self, i: usize, up: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    up,
                    [needs(x), needs(w), needs(b)],
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dw.map(|g| (*w, g)));
                out.extend(db.map(|g| (*b, g)));
            }
            Op::Upsample { x, factor } => {
                let dims = self.value(*x).dims4()?;
                out.push((*x, kernels::upsample_backward(dims, *factor, up)));
            }
            Op::Relu { x } => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                    .collect();
                out.push((*x, g));
            }
            Op::MaxPool { x, argmax } => {
                let mut g = vec![0.0; self.value(*x).numel()];
                for (&src, &u) in argmax.iter().zip(up) {
                    g[src] += u;
                }
                out.push((*x, g));
            }
            Op::Add { a, b, bias } => {
                if needs(a) {
                    out.push((*a, up.to_vec()));
                }
                if needs(b) {
                    if *bias {
                        let [_, c, h, w] = self.value(*a).dims4()?;
                        let mut g = vec![0.0; c];
                        for (idx, &u) in up.iter().enumerate() {
                            g[(idx / (h * w)) % c] += u;
                        }
                        out.push((*b, g));
                    } else {
                        out.push((*b, up.to_vec()));
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(a) {
                    out.push((*a, bv.iter().zip(up).map(|(y, u)| y * u).collect()));
                }
                if needs(b) {
                    out.push((*b, av.iter().zip(up).map(|(x, u)| x * u).collect()));
                }
            }
            Op::Abs { x } => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| {
                        if v > 0.0 {
                            u
                        } else if v < 0.0 {
                            -u
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, g));
            }
            Op::Scale { x, factor } => {
                out.push((*x, up.iter().map(|u| u * factor).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![up[0]; self.value(*x).numel()]));
            }
            Op::SoftmaxCe {
                logits,
                targets,
                ignore,
                norm,
                softmax,
            } => {
                let c = self.value(*logits).shape()[1];
                let scale = up[0] / norm;
                let mut g = vec![0.0; softmax.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let row = &mut g[r * c..(r + 1) * c];
                    for (gv, &p) in row.iter_mut().zip(&softmax[r * c..(r + 1) * c]) {
                        *gv = p * scale;
                    }
                    row[t] -= scale;
                }
                out.push((*logits, g));
            }
            Op::SmoothL1 { pred, target, norm } => {
                let scale = up[0] / norm;
                let g: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(p, t)| {
                        let d = p - t;
                        scale * if d.abs() < 1.0 { d } else { d.signum() }
                    })
                    .collect();
                if needs(target) {
                    out.push((*target, g.iter().map(|v| -v).collect()));
                }
                out.push((*pred, g));
            }
            Op::ToRows { levels, group } => {
                let n = self.value(levels[0]).shape()[0];
                let mut grads: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; self.value(*l).numel()]).collect();
                let mut cursor = 0;
                for img in 0..n {
                    for (l, g) in levels.iter().zip(grads.iter_mut()) {
                        let [_, ch, h, w] = self.value(*l).dims4()?;
                        let hw = h * w;
                        let k = ch / group;
                        let dst = &mut g[img * ch * hw..(img + 1) * ch * hw];
                        for cell in 0..hw {
                            for gi in 0..*group {
                                for kk in 0..k {
                                    dst[(gi * k + kk) * hw + cell] += up[cursor];
                                    cursor += 1;
                                }
                            }
                        }
                    }
                }
                out.extend(levels.iter().copied().zip(grads));
            }
            Op::SelectRows { x, rows } => {
                let [_, k] = self.value(*x).dims2()?;
                let mut g = vec![0.0; self.value(*x).numel()];
                for (j, &r) in rows.iter().enumerate() {
                    for kk in 0..k {
                        g[r * k + kk] += up[j * k + kk];
                    }
                }
                out.push((*x, g));
            }
        }
        Ok(out)
    }
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(TensorError::Config(format!(
            "conv2d: extent {len} with pad {pad} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}
