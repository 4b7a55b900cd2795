//! The gradient tape: explicit, single-owner, reverse-mode.
//!
//! A [`Tape`] records every differentiable operation applied to tensors that
//! were registered on it. Node order is topological by construction (an
//! operation's operands are recorded before it), so the backward pass is a
//! single reverse scan that visits each node exactly once.
//!
//! Usage contract:
//! - create one tape per training step, register inputs and parameters as
//!   leaves, run the forward pass through tape methods, call
//!   [`Tape::backward`] on a scalar loss;
//! - leaf gradients persist on the tape and accumulate across repeated
//!   backward calls until [`Tape::clear_grads`];
//! - tensors from different tapes must not be mixed (checked at every op).

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{checked_mode, NodeRef, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_TAG: AtomicU64 = AtomicU64::new(1);

/// Reduction kind for [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Shapes are identical.
    Equal,
    /// `b`'s shape is a strict suffix of `a`'s; `b` cycles over `a`'s
    /// leading axes (bias-style).
    Trailing,
    /// `a: [N,C,H,W]`, `b: [N,1,H,W]`; `b` repeats across channels.
    Channel,
}

enum Rule {
    Leaf,
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize, bc: Broadcast },
    Div { a: usize, b: usize },
    Scale { a: usize, k: f64 },
    AddConst { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: kernels::ConvDims,
        /// Receptive-field matrix saved from the forward pass.
        cols: Vec<f64>,
        /// Fused `max(0, x)` applied while gathering the receptive fields.
        pre_relu: bool,
    },
    MaxPool { x: usize, argmax: Vec<usize> },
    Upsample { x: usize, factor: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Softmax { a: usize, axis: usize },
    ReduceAll { a: usize, kind: Reduce },
    ReduceAxis { a: usize, kind: Reduce, axis: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    rule: Rule,
    /// Persistent gradient accumulator; populated for leaves only.
    grad: Option<Vec<f64>>,
}

/// Reverse-mode gradient tape. See the module docs for the usage contract.
pub struct Tape {
    tag: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            tag: NEXT_TAPE_TAG.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a leaf on this tape and returns the tracked
    /// handle. Leaves are where [`Tape::backward`] deposits gradients.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.payload(),
            rule: Rule::Leaf,
            grad: None,
        });
        Tensor::with_node(t.shape().to_vec(), t.payload(), NodeRef { tape_tag: self.tag, id })
    }

    /// Accumulated gradient of a leaf, if any gradient has flowed to it.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node()?;
        if node.tape_tag != self.tag {
            return None;
        }
        let nodes = self.nodes.borrow();
        let n = &nodes[node.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_vec(g.clone(), &n.shape).expect("grad shape matches node"))
    }

    /// Drops all accumulated leaf gradients.
    pub fn clear_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Resolves an operand to a node id, implicitly lifting untracked
    /// tensors to constant leaves.
    fn operand(&self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(node) if node.tape_tag == self.tag => Ok(node.id),
            Some(_) => Err(Error::TapeMismatch),
            None => Ok(self.leaf(t).node().expect("leaf is tracked").id),
        }
    }

    fn record(&self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, rule: Rule) -> Tensor {
        if checked_mode() {
            assert!(
                data.iter().all(|v| v.is_finite()),
                "non-finite value produced by op `{op}` (DABDU_CHECKED=1)"
            );
        }
        let data = Rc::new(data);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape: shape.clone(), data: Rc::clone(&data), rule, grad: None });
        Tensor::with_node(shape, data, NodeRef { tape_tag: self.tag, id })
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn broadcast_of(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
        if a == b {
            return Ok(Broadcast::Equal);
        }
        if b.len() < a.len() && a[a.len() - b.len()..] == *b {
            return Ok(Broadcast::Trailing);
        }
        if a.len() == 4
            && b.len() == 4
            && b[1] == 1
            && a[0] == b[0]
            && a[2] == b[2]
            && a[3] == b[3]
        {
            return Ok(Broadcast::Channel);
        }
        Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
    }

    fn eltwise_forward(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let ad = a.data();
        let bd = b.data();
        match bc {
            Broadcast::Equal => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Trailing => {
                let len = bd.len();
                ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % len])).collect()
            }
            Broadcast::Channel => {
                let (n, c, h, w) = shape4(a.shape());
                let plane = h * w;
                let mut out = vec![0.0; ad.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let bbase = ni * plane;
                        for p in 0..plane {
                            out[base + p] = f(ad[base + p], bd[bbase + p]);
                        }
                    }
                }
                out
            }
        }
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bc = Self::broadcast_of("add", a.shape(), b.shape())?;
        let (ai, bi) = (self.operand(a)?, self.operand(b)?);
        let out = Self::eltwise_forward(a, b, bc, |x, y| x + y);
        Ok(self.record("add", a.shape().to_vec(), out, Rule::Add { a: ai, b: bi, bc }))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let (ai, bi) = (self.operand(a)?, self.operand(b)?);
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        Ok(self.record("sub", a.shape().to_vec(), out, Rule::Sub { a: ai, b: bi }))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bc = Self::broadcast_of("mul", a.shape(), b.shape())?;
        let (ai, bi) = (self.operand(a)?, self.operand(b)?);
        let out = Self::eltwise_forward(a, b, bc, |x, y| x * y);
        Ok(self.record("mul", a.shape().to_vec(), out, Rule::Mul { a: ai, b: bi, bc }))
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("div", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let (ai, bi) = (self.operand(a)?, self.operand(b)?);
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        Ok(self.record("div", a.shape().to_vec(), out, Rule::Div { a: ai, b: bi }))
    }

    pub fn scale(&self, a: &Tensor, k: f64) -> Result<Tensor> {
        let ai = self.operand(a)?;
        let out = a.data().iter().map(|&x| k * x).collect();
        Ok(self.record("scale", a.shape().to_vec(), out, Rule::Scale { a: ai, k }))
    }

    pub fn add_const(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let ai = self.operand(a)?;
        let out = a.data().iter().map(|&x| x + c).collect();
        Ok(self.record("add_const", a.shape().to_vec(), out, Rule::AddConst { a: ai }))
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let ai = self.operand(a)?;
        let out = a.data().iter().map(|&x| sigmoid(x)).collect();
        Ok(self.record("sigmoid", a.shape().to_vec(), out, Rule::Sigmoid { a: ai }))
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let ai = self.operand(a)?;
        let out = a.data().iter().map(|&x| x.tanh()).collect();
        Ok(self.record("tanh", a.shape().to_vec(), out, Rule::Tanh { a: ai }))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let ai = self.operand(a)?;
        let out = a.data().iter().map(|&x| x.max(0.0)).collect();
        Ok(self.record("relu", a.shape().to_vec(), out, Rule::Relu { a: ai }))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims("matmul", a.shape())?;
        let (k2, n) = mat_dims("matmul", b.shape())?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let (ai, bi) = (self.operand(a)?, self.operand(b)?);
        let out = kernels::mm(a.data(), b.data(), m, k, n);
        Ok(self.record("matmul", vec![m, n], out, Rule::Matmul { a: ai, b: bi, m, k, n }))
    }

    /// Affine map `x·w + bias` with the bias broadcast over rows.
    pub fn linear(&self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims("linear", x.shape())?;
        let (k2, n) = mat_dims("linear", w.shape())?;
        if k != k2 || bias.shape() != [n] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, bias {:?}", x.shape(), w.shape(), bias.shape()),
            ));
        }
        let (xi, wi, bi) = (self.operand(x)?, self.operand(w)?, self.operand(bias)?);
        let mut out = kernels::mm(x.data(), w.data(), m, k, n);
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        Ok(self.record("linear", vec![m, n], out, Rule::Linear { x: xi, w: wi, b: bi, m, k, n }))
    }

    // ── Convolution and resampling ──────────────────────────────────────

    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        self.conv2d_impl(x, w, bias, stride, pad, false)
    }

    /// `conv2d(relu(x), ...)` as one op: the ReLU happens while gathering
    /// receptive fields, so the pre-activation never materializes.
    pub fn conv2d_pre_relu(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        self.conv2d_impl(x, w, bias, stride, pad, true)
    }

    fn conv2d_impl(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        pre_relu: bool,
    ) -> Result<Tensor> {
        let (n, c, h, wd) = shape4_checked("conv2d", x.shape())?;
        let (f, cw, kh, kw) = shape4_checked("conv2d", w.shape())?;
        if cw != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {cw} input channels, input has {c}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [f] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}, want [{f}]", b.shape())));
            }
        }
        let dims = kernels::ConvDims {
            batch: n,
            in_ch: c,
            in_h: h,
            in_w: wd,
            out_ch: f,
            k_h: kh,
            k_w: kw,
            stride,
            pad,
            out_h: kernels::conv_out_extent(h, kh, stride, pad),
            out_w: kernels::conv_out_extent(wd, kw, stride, pad),
        };
        let xi = self.operand(x)?;
        let wi = self.operand(w)?;
        let bi = bias.map(|b| self.operand(b)).transpose()?;
        let (out, cols) =
            kernels::conv2d_with_cols(x.data(), w.data(), bias.map(|b| b.data()), &dims, pre_relu);
        let shape = vec![n, f, dims.out_h, dims.out_w];
        Ok(self.record(
            "conv2d",
            shape,
            out,
            Rule::Conv2d { x: xi, w: wi, b: bi, dims, cols, pre_relu },
        ))
    }

    /// Max pooling with square window equal to the stride. Input extents
    /// must be divisible by the window; there is no implicit padding.
    pub fn maxpool2d(&self, x: &Tensor, window: usize) -> Result<Tensor> {
        let (n, c, h, w) = shape4_checked("maxpool2d", x.shape())?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("extents {h}x{w} not divisible by window {window}"),
            ));
        }
        let xi = self.operand(x)?;
        let (out, argmax) = kernels::maxpool2d(x.data(), n, c, h, w, window);
        let shape = vec![n, c, h / window, w / window];
        Ok(self.record("maxpool2d", shape, out, Rule::MaxPool { x: xi, argmax }))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample2d(&self, x: &Tensor, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = shape4_checked("upsample2d", x.shape())?;
        if factor == 0 {
            return Err(Error::shape("upsample2d", "factor must be >= 1"));
        }
        let xi = self.operand(x)?;
        let out = kernels::upsample2d(x.data(), n, c, h, w, factor);
        let shape = vec![n, c, h * factor, w * factor];
        Ok(self.record("upsample2d", shape, out, Rule::Upsample { x: xi, factor }))
    }

    // ── Shape and reduction ─────────────────────────────────────────────

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "no operands"));
        }
        if parts.len() == 1 {
            // concatenation of one tensor is the tensor; no node needed
            let only = parts[0];
            return match only.node() {
                Some(node) if node.tape_tag != self.tag => Err(Error::TapeMismatch),
                Some(_) => Ok(only.clone()),
                None => Ok(self.leaf(only)),
            };
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.shape().len() != rank {
                return Err(Error::shape("concat", "rank mismatch"));
            }
            for (d, (&pe, &oe)) in p.shape().iter().zip(&out_shape).enumerate() {
                if d != axis && pe != oe {
                    return Err(Error::shape(
                        "concat",
                        format!("axis {d} extents differ: {pe} vs {oe}"),
                    ));
                }
            }
            out_shape[axis] += p.shape()[axis];
        }
        let ids = parts.iter().map(|p| self.operand(p)).collect::<Result<Vec<_>>>()?;
        let (outer, _, inner) = kernels::axis_geometry(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.record("concat", out_shape, out, Rule::Concat { parts: ids, axis }))
    }

    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.shape().len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for rank {}", a.shape().len()),
            ));
        }
        let ai = self.operand(a)?;
        let out = kernels::softmax(a.data(), a.shape(), axis);
        Ok(self.record("softmax", a.shape().to_vec(), out, Rule::Softmax { a: ai, axis }))
    }

    /// Reduction over all elements (`axis = None`, scalar result) or along
    /// one axis (the axis is removed from the shape).
    pub fn reduce(&self, a: &Tensor, kind: Reduce, axis: Option<usize>) -> Result<Tensor> {
        let ai = self.operand(a)?;
        match axis {
            None => {
                let mut acc = 0.0;
                for &v in a.data() {
                    acc += v;
                }
                if kind == Reduce::Mean {
                    acc /= a.numel() as f64;
                }
                Ok(self.record("reduce", Vec::new(), vec![acc], Rule::ReduceAll { a: ai, kind }))
            }
            Some(axis) => {
                if axis >= a.shape().len() {
                    return Err(Error::shape(
                        "reduce",
                        format!("axis {axis} out of range for rank {}", a.shape().len()),
                    ));
                }
                let (outer, len, inner) = kernels::axis_geometry(a.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let data = a.data();
                for o in 0..outer {
                    for t in 0..len {
                        let base = (o * len + t) * inner;
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(&data[base..base + inner]) {
                            *d += v;
                        }
                    }
                }
                if kind == Reduce::Mean {
                    for v in &mut out {
                        *v /= len as f64;
                    }
                }
                let mut shape = a.shape().to_vec();
                shape.remove(axis);
                Ok(self.record("reduce", shape, out, Rule::ReduceAxis { a: ai, kind, axis }))
            }
        }
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        self.reduce(a, Reduce::Sum, None)
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        self.reduce(a, Reduce::Mean, None)
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} has {} elements, target {:?} has {}", a.shape(), a.numel(), shape, numel),
            ));
        }
        let ai = self.operand(a)?;
        let out = a.data().to_vec();
        Ok(self.record("reshape", shape.to_vec(), out, Rule::Reshape { a: ai }))
    }

    pub fn permute(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} is not a permutation of 0..{rank}"),
            ));
        }
        let ai = self.operand(a)?;
        let out = kernels::permute(a.data(), a.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
        Ok(self.record("permute", shape, out, Rule::Permute { a: ai, axes: axes.to_vec() }))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients land on leaves and
    /// accumulate across repeated calls until [`Tape::clear_grads`].
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let loss_id = match loss.node() {
            Some(node) if node.tape_tag == self.tag => node.id,
            Some(_) => return Err(Error::TapeMismatch),
            None => return Err(Error::Untracked),
        };

        let mut nodes = self.nodes.borrow_mut();
        // Transient adjoints for this sweep; only leaf adjoints are folded
        // into the persistent accumulators.
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss_id).map(|_| None).collect();
        adj[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let Some(g) = adj[id].take() else { continue };
            // Temporarily move the rule out so the match can index other
            // nodes while this one is being visited.
            let rule = std::mem::replace(&mut nodes[id].rule, Rule::Leaf);
            // Pass-through rules forward the buffer itself instead of
            // copying it.
            match &rule {
                Rule::AddConst { a } | Rule::Reshape { a } => accumulate_owned(&mut adj, *a, g),
                _ => self.push_adjoints(&mut nodes, &mut adj, id, &rule, &g),
            }
            nodes[id].rule = rule;
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn push_adjoints(
        &self,
        nodes: &mut [Node],
        adj: &mut [Option<Vec<f64>>],
        id: usize,
        rule: &Rule,
        g: &[f64],
    ) {
        match rule {
            Rule::Leaf => match &mut nodes[id].grad {
                Some(acc) => {
                    for (a, &gv) in acc.iter_mut().zip(g) {
                        *a += gv;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            },
            Rule::Add { a, b, bc } => {
                accumulate(adj, *a, g);
                match bc {
                    Broadcast::Equal => accumulate(adj, *b, g),
                    Broadcast::Trailing => {
                        let blen = nodes[*b].data.len();
                        let mut db = vec![0.0; blen];
                        for (i, &gv) in g.iter().enumerate() {
                            db[i % blen] += gv;
                        }
                        accumulate_owned(adj, *b, db);
                    }
                    Broadcast::Channel => {
                        let db = channel_fold(g, &nodes[id].shape, None);
                        accumulate_owned(adj, *b, db);
                    }
                }
            }
            Rule::Sub { a, b } => {
                accumulate(adj, *a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                accumulate_owned(adj, *b, neg);
            }
            Rule::Mul { a, b, bc } => {
                let ad = Rc::clone(&nodes[*a].data);
                let bd = Rc::clone(&nodes[*b].data);
                match bc {
                    Broadcast::Equal => {
                        let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect();
                        let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect();
                        accumulate_owned(adj, *a, da);
                        accumulate_owned(adj, *b, db);
                    }
                    Broadcast::Trailing => {
                        let blen = bd.len();
                        let da: Vec<f64> =
                            g.iter().enumerate().map(|(i, &gv)| gv * bd[i % blen]).collect();
                        let mut db = vec![0.0; blen];
                        for (i, &gv) in g.iter().enumerate() {
                            db[i % blen] += gv * ad[i];
                        }
                        accumulate_owned(adj, *a, da);
                        accumulate_owned(adj, *b, db);
                    }
                    Broadcast::Channel => {
                        let shape = &nodes[id].shape;
                        let (n, c, h, w) = shape4(shape);
                        let plane = h * w;
                        let mut da = vec![0.0; g.len()];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let bbase = ni * plane;
                                for p in 0..plane {
                                    da[base + p] = g[base + p] * bd[bbase + p];
                                }
                            }
                        }
                        let db = channel_fold(g, shape, Some(&ad));
                        accumulate_owned(adj, *a, da);
                        accumulate_owned(adj, *b, db);
                    }
                }
            }
            Rule::Div { a, b } => {
                let ad = Rc::clone(&nodes[*a].data);
                let bd = Rc::clone(&nodes[*b].data);
                let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                accumulate_owned(adj, *a, da);
                accumulate_owned(adj, *b, db);
            }
            Rule::Scale { a, k } => {
                let da: Vec<f64> = g.iter().map(|&gv| k * gv).collect();
                accumulate_owned(adj, *a, da);
            }
            Rule::AddConst { a } => accumulate(adj, *a, g),
            Rule::Sigmoid { a } => {
                let od = Rc::clone(&nodes[id].data);
                let da: Vec<f64> =
                    g.iter().zip(od.iter()).map(|(&gv, &ov)| gv * ov * (1.0 - ov)).collect();
                accumulate_owned(adj, *a, da);
            }
            Rule::Tanh { a } => {
                let od = Rc::clone(&nodes[id].data);
                let da: Vec<f64> =
                    g.iter().zip(od.iter()).map(|(&gv, &ov)| gv * (1.0 - ov * ov)).collect();
                accumulate_owned(adj, *a, da);
            }
            Rule::Relu { a } => {
                let xd = Rc::clone(&nodes[*a].data);
                let da: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate_owned(adj, *a, da);
            }
            Rule::Matmul { a, b, m, k, n } => {
                let ad = Rc::clone(&nodes[*a].data);
                let bd = Rc::clone(&nodes[*b].data);
                let da = kernels::mm_a_bt(g, &bd, *m, *n, *k);
                let db = kernels::mm_at_b(&ad, g, *m, *k, *n);
                accumulate_owned(adj, *a, da);
                accumulate_owned(adj, *b, db);
            }
            Rule::Linear { x, w, b, m, k, n } => {
                let xd = Rc::clone(&nodes[*x].data);
                let wd = Rc::clone(&nodes[*w].data);
                let dx = kernels::mm_a_bt(g, &wd, *m, *n, *k);
                let dw = kernels::mm_at_b(&xd, g, *m, *k, *n);
                let mut db = vec![0.0; *n];
                for row in g.chunks(*n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                accumulate_owned(adj, *x, dx);
                accumulate_owned(adj, *w, dw);
                accumulate_owned(adj, *b, db);
            }
            Rule::Conv2d { x, w, b, dims, cols, pre_relu } => {
                let wd = Rc::clone(&nodes[*w].data);
                let xd = pre_relu.then(|| Rc::clone(&nodes[*x].data));
                let (dx, dw, db) = kernels::conv2d_backward_from_cols(
                    cols,
                    &wd,
                    g,
                    dims,
                    b.is_some(),
                    xd.as_deref().map(|v| v.as_slice()),
                );
                accumulate_owned(adj, *x, dx);
                accumulate_owned(adj, *w, dw);
                if let (Some(bi), Some(db)) = (b, db) {
                    accumulate_owned(adj, *bi, db);
                }
            }
            Rule::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; nodes[*x].data.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                accumulate_owned(adj, *x, dx);
            }
            Rule::Upsample { x, factor } => {
                let (n, c, h, w) = shape4(&nodes[*x].shape);
                let dx = kernels::upsample2d_backward(g, n, c, h, w, *factor);
                accumulate_owned(adj, *x, dx);
            }
            Rule::Concat { parts, axis } => {
                let out_shape = &nodes[id].shape;
                let (outer, _, inner) = kernels::axis_geometry(out_shape, *axis);
                let chunks: Vec<usize> =
                    parts.iter().map(|&p| nodes[p].shape[*axis] * inner).collect();
                let total: usize = chunks.iter().sum();
                for (pi, &pid) in parts.iter().enumerate() {
                    let before: usize = chunks[..pi].iter().sum();
                    let mut dp = Vec::with_capacity(chunks[pi] * outer);
                    for o in 0..outer {
                        let start = o * total + before;
                        dp.extend_from_slice(&g[start..start + chunks[pi]]);
                    }
                    accumulate_owned(adj, pid, dp);
                }
            }
            Rule::Softmax { a, axis } => {
                let sd = Rc::clone(&nodes[id].data);
                let dx = kernels::softmax_backward(&sd, g, &nodes[id].shape, *axis);
                accumulate_owned(adj, *a, dx);
            }
            Rule::ReduceAll { a, kind } => {
                let alen = nodes[*a].data.len();
                let seed = match kind {
                    Reduce::Sum => g[0],
                    Reduce::Mean => g[0] / alen as f64,
                };
                accumulate_owned(adj, *a, vec![seed; alen]);
            }
            Rule::ReduceAxis { a, kind, axis } => {
                let in_shape = &nodes[*a].shape;
                let (outer, len, inner) = kernels::axis_geometry(in_shape, *axis);
                let scale = match kind {
                    Reduce::Sum => 1.0,
                    Reduce::Mean => 1.0 / len as f64,
                };
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for t in 0..len {
                        let dst = &mut da[(o * len + t) * inner..(o * len + t + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d = gv * scale;
                        }
                    }
                }
                accumulate_owned(adj, *a, da);
            }
            Rule::Reshape { a } => accumulate(adj, *a, g),
            Rule::Permute { a, axes } => {
                let out_shape = &nodes[id].shape;
                let mut inverse = vec![0usize; axes.len()];
                for (d, &ax) in axes.iter().enumerate() {
                    inverse[ax] = d;
                }
                let da = kernels::permute(g, out_shape, &inverse);
                accumulate_owned(adj, *a, da);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut adj[id] {
        Some(acc) => {
            for (a, &gv) in acc.iter_mut().zip(g) {
                *a += gv;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(adj: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut adj[id] {
        Some(acc) => {
            for (a, gv) in acc.iter_mut().zip(g) {
                *a += gv;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` (optionally weighted elementwise by `weight`) over the channel
/// axis of an `[N,C,H,W]` shape, producing an `[N,1,H,W]`-sized buffer.
fn channel_fold(g: &[f64], shape: &[usize], weight: Option<&[f64]>) -> Vec<f64> {
    let (n, c, h, w) = shape4(shape);
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let obase = ni * plane;
            match weight {
                None => {
                    for p in 0..plane {
                        out[obase + p] += g[base + p];
                    }
                }
                Some(wd) => {
                    for p in 0..plane {
                        out[obase + p] += g[base + p] * wd[base + p];
                    }
                }
            }
        }
    }
    out
}

// Straight-line logistic; IEEE saturation handles both tails (`exp` of a
// large argument overflows to infinity, giving exactly 0.0).
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn shape4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn shape4_checked(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected rank-4 [N,C,H,W], got {shape:?}")));
    }
    Ok(shape4(shape))
}

fn mat_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::shape(op, format!("expected rank-2 matrix, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}
