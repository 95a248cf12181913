//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every op call evaluates its value immediately and records enough state to
//! propagate gradients later. A graph holds one recording: [`Graph::backward`]
//! consumes it, and [`Graph::reset`] starts a fresh one. Node handles from an
//! earlier recording are rejected.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::{lit, Real, Tensor};
use crate::error::{EasError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    idx: usize,
    generation: u64,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleBy { x: usize, s: usize },
    MulConst { x: usize, c: Vec<T> },
    Affine { x: usize, a: T },
    AddRowBias { x: usize, b: usize },
    MatMul { a: usize, b: usize, n: usize, k: usize, m: usize },
    Sigmoid(usize),
    Tanh(usize),
    HardSwish(usize),
    Logit { x: usize, lo: T, hi: T },
    Square(usize),
    Sum(usize),
    Mean(usize),
    Narrow { x: usize, axis: usize, start: usize, len: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Fill { s: usize },
    MulChannels { x: usize, m: usize },
    Reshape(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Depthwise { x: usize, w: usize, geom: ConvGeom },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, invstd: Vec<T> },
    FixedNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, invstd: Vec<T> },
    GlobalAvgPool { x: usize, n: usize, hw: usize, c: usize },
    MaskedCrossEntropy { logits: usize, probs: Vec<T>, mask: Vec<bool>, labels: Vec<usize>, c: usize },
    MaskedDistill { logits: usize, teacher: Vec<T>, probs: Vec<T>, mask: Vec<bool>, c: usize },
    StraightThrough { soft: usize },
    Polynomial { x: usize, terms: Arc<Vec<Monomial>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleBy { .. } => "scale_by",
            Op::MulConst { .. } => "mul_const",
            Op::Affine { .. } => "affine",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::MatMul { .. } => "matmul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::HardSwish(_) => "hardswish",
            Op::Logit { .. } => "logit",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Fill { .. } => "fill",
            Op::MulChannels { .. } => "mul_channels",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise",
            Op::BatchNorm { .. } => "batch_norm",
            Op::FixedNorm { .. } => "fixed_norm",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::MaskedDistill { .. } => "masked_distill",
            Op::StraightThrough { .. } => "straight_through",
            Op::Polynomial { .. } => "polynomial",
        }
    }
}

/// `coef * prod(x[v] for v in vars)`; an empty `vars` is a constant term.
#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub vars: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics recorded by batch normalization nodes, keyed by the
/// caller-supplied tag.
pub type NormRecord<T> = Vec<(String, Vec<T>, Vec<T>)>;

#[derive(Clone, Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, usize>,
    estimators: Vec<(usize, String)>,
    generation: u64,
    consumed: bool,
    norm_record: Option<NormRecord<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient per registered parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Real = f32> {
    pub by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }
}

fn slice_err(node: usize, op: &'static str, msg: impl Into<String>) -> EasError {
    EasError::NodeShape { node, op, msg: msg.into() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            estimators: Vec::new(),
            generation: 0,
            consumed: false,
            norm_record: None,
        }
    }

    /// Drops the current recording. Handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.estimators.clear();
        self.generation += 1;
        self.consumed = false;
        self.norm_record = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Starts collecting batch-norm statistics for calibration.
    pub fn record_norm_stats(&mut self) {
        self.norm_record = Some(Vec::new());
    }

    pub fn take_norm_stats(&mut self) -> Option<NormRecord<T>> {
        self.norm_record.take()
    }

    fn id(&self, idx: usize) -> NodeId {
        NodeId { idx, generation: self.generation }
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.generation != self.generation || id.idx >= self.nodes.len() {
            return Err(EasError::Backward(format!(
                "node {} does not belong to the current recording",
                id.idx
            )));
        }
        Ok(id.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.id(self.nodes.len() - 1)
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.idx].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.idx].value.shape()
    }

    /// Non-trainable input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        if let Some(&idx) = self.params.get(name) {
            return self.id(idx);
        }
        let id = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), id.idx);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).map(|&i| self.id(i))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Straight-through nodes recorded so far, with their labels.
    pub fn estimators(&self) -> Vec<(NodeId, String)> {
        self.estimators.iter().map(|(i, l)| (self.id(*i), l.clone())).collect()
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(slice_err(
                self.nodes.len(),
                op,
                format!(
                    "operand shapes {:?} and {:?} differ",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape(op, a, b)?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((a, b, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x * s` for a one-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (x, s) = (self.check(x)?, self.check(s)?);
        if self.nodes[s].value.len() != 1 {
            return Err(slice_err(self.nodes.len(), "scale_by", "scale must have one element"));
        }
        let sv = self.nodes[s].value.item();
        let v = self.nodes[x].value.map(|a| a * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::ScaleBy { x, s }, rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: NodeId, c: &Tensor<T>) -> Result<NodeId> {
        let x = self.check(x)?;
        if self.nodes[x].value.shape() != c.shape() {
            return Err(slice_err(self.nodes.len(), "mul_const", "constant shape mismatch"));
        }
        let data = self.nodes[x].value.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let v = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MulConst { x, c: c.data().to_vec() }, rg))
    }

    /// `a * x + b` with constant scalars.
    pub fn affine(&mut self, x: NodeId, a: T, b: T) -> Result<NodeId> {
        let x = self.check(x)?;
        let v = self.nodes[x].value.map(|v| a * v + b);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Affine { x, a }, rg))
    }

    /// `x[n, m] + b[m]`.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, b) = (self.check(x)?, self.check(b)?);
        let xs = self.nodes[x].value.shape().to_vec();
        let m = self.nodes[b].value.len();
        if xs.len() != 2 || xs[1] != m {
            return Err(slice_err(self.nodes.len(), "add_row_bias", format!("x {:?} vs bias len {m}", xs)));
        }
        let bv = self.nodes[b].value.data().to_vec();
        let mut data = self.nodes[x].value.data().to_vec();
        for row in data.chunks_exact_mut(m) {
            for (a, &c) in row.iter_mut().zip(&bv) {
                *a += c;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(xs, data)?, Op::AddRowBias { x, b }, rg))
    }

    /// `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(slice_err(self.nodes.len(), "matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.nodes[a].value.data(), self.nodes[b].value.data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::MatMul { a, b, n, k, m }, rg))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<NodeId> {
        let x = self.check(x)?;
        let v = self.nodes[x].value.map(f);
        let rg = self.rg(x);
        Ok(self.push(v, op(x), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn hardswish(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, kernels::hardswish, Op::HardSwish)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v * v, Op::Square)
    }

    /// `log(p / (1 - p))` of `p` clamped to `[lo, hi]`; zero gradient where clamped.
    pub fn logit(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        self.unary(
            x,
            move |p| {
                let p = p.max(lo).min(hi);
                (p / (T::one() - p)).ln()
            },
            move |x| Op::Logit { x, lo, hi },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.check(x)?;
        let v = Tensor::scalar(self.nodes[x].value.sum());
        let rg = self.rg(x);
        Ok(self.push(v, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.check(x)?;
        let n = T::from_usize(self.nodes[x].value.len()).unwrap();
        let v = Tensor::scalar(self.nodes[x].value.sum() / n);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Mean(x), rg))
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let x = self.check(x)?;
        let node = self.nodes.len();
        let v = self.nodes[x]
            .value
            .narrow(axis, start, len)
            .map_err(|e| slice_err(node, "narrow", e.to_string()))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Narrow { x, axis, start, len }, rg))
    }

    /// One element of a 1-D node as a `[1]` node.
    pub fn element(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        self.narrow(x, 0, i, 1)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let node = self.nodes.len();
        if xs.is_empty() {
            return Err(slice_err(node, "concat", "no operands"));
        }
        let idx: Vec<usize> = xs.iter().map(|&x| self.check(x)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(slice_err(node, "concat", "axis out of range"));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d]) {
                return Err(slice_err(node, "concat", format!("operand shape {s:?} incompatible with {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let len = self.nodes[i].value.shape()[axis] * inner;
                data.extend_from_slice(&self.nodes[i].value.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { xs: idx, axis }, rg))
    }

    /// Broadcasts a one-element node to `shape`.
    pub fn fill(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.check(s)?;
        if self.nodes[s].value.len() != 1 {
            return Err(slice_err(self.nodes.len(), "fill", "source must have one element"));
        }
        let v = Tensor::full(shape, self.nodes[s].value.item());
        let rg = self.rg(s);
        Ok(self.push(v, Op::Fill { s }, rg))
    }

    /// Multiplies the last axis of `x` by the vector `m`.
    pub fn mul_channels(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (x, m) = (self.check(x)?, self.check(m)?);
        let c = *self.nodes[x].value.shape().last().unwrap();
        if self.nodes[m].value.len() != c {
            return Err(slice_err(
                self.nodes.len(),
                "mul_channels",
                format!("mask length {} vs {c} channels", self.nodes[m].value.len()),
            ));
        }
        let mv = self.nodes[m].value.data().to_vec();
        let mut data = self.nodes[x].value.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (a, &b) in row.iter_mut().zip(&mv) {
                *a *= b;
            }
        }
        let shape = self.nodes[x].value.shape().to_vec();
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulChannels { x, m }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let x = self.check(x)?;
        let node = self.nodes.len();
        let v = self.nodes[x]
            .value
            .clone()
            .reshape(shape)
            .map_err(|e| slice_err(node, "reshape", e.to_string()))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    fn nhwc(&self, x: usize, op: &'static str) -> Result<[usize; 4]> {
        let s = self.nodes[x].value.shape();
        if s.len() != 4 {
            return Err(slice_err(self.nodes.len(), op, format!("expected NHWC input, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Full convolution, `x: [n,h,w,c_in]`, `w: [k,k,c_in,c_out]`, padding `k/2`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (x, w) = (self.check(x)?, self.check(w)?);
        let [n, h, wd, c] = self.nhwc(x, "conv2d")?;
        let ws = self.nodes[w].value.shape();
        if ws.len() != 4 || ws[0] != ws[1] || ws[2] != c {
            return Err(slice_err(self.nodes.len(), "conv2d", format!("weight {ws:?} vs {c} input channels")));
        }
        let geom = ConvGeom { n, h, w: wd, c_in: c, c_out: ws[3], k: ws[0], stride };
        let data = kernels::conv2d_direct(self.nodes[x].value.data(), self.nodes[w].value.data(), geom);
        let v = Tensor::new(vec![n, geom.out_h(), geom.out_w(), geom.c_out], data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(v, Op::Conv2d { x, w, geom }, rg))
    }

    /// Depthwise convolution, `w: [k,k,c]`.
    pub fn depthwise(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (x, w) = (self.check(x)?, self.check(w)?);
        let [n, h, wd, c] = self.nhwc(x, "depthwise")?;
        let ws = self.nodes[w].value.shape();
        if ws.len() != 3 || ws[0] != ws[1] || ws[2] != c {
            return Err(slice_err(self.nodes.len(), "depthwise", format!("weight {ws:?} vs {c} channels")));
        }
        let geom = ConvGeom { n, h, w: wd, c_in: c, c_out: c, k: ws[0], stride };
        let data = kernels::depthwise(self.nodes[x].value.data(), self.nodes[w].value.data(), geom);
        let v = Tensor::new(vec![n, geom.out_h(), geom.out_w(), c], data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(v, Op::Depthwise { x, w, geom }, rg))
    }

    /// 1x1 convolution as a matmul over flattened pixels.
    pub fn pointwise(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let [n, h, wd, c] = self.nhwc(xi, "pointwise")?;
        let flat = self.reshape(x, &[n * h * wd, c])?;
        let y = self.matmul(flat, w)?;
        let co = self.shape(y)[1];
        self.reshape(y, &[n, h, wd, co])
    }

    fn norm_operands(&self, x: usize, gamma: usize, beta: usize, op: &'static str) -> Result<usize> {
        let c = *self.nodes[x].value.shape().last().unwrap();
        if self.nodes[gamma].value.len() != c || self.nodes[beta].value.len() != c {
            return Err(slice_err(self.nodes.len(), op, format!("affine params do not match {c} channels")));
        }
        Ok(c)
    }

    /// Normalization with statistics of the current batch (all axes but the last).
    /// When statistics recording is on, the batch mean and variance are appended
    /// under `tag`.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, tag: &str) -> Result<NodeId> {
        let (x, gamma, beta) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let c = self.norm_operands(x, gamma, beta, "batch_norm")?;
        let (mean, var) = kernels::channel_stats(self.nodes[x].value.data(), c);
        let out = self.normalized(x, gamma, beta, &mean, &var);
        if let Some(rec) = self.norm_record.as_mut() {
            rec.push((tag.to_string(), mean, var));
        }
        let (v, xhat, invstd) = out?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(v, Op::BatchNorm { x, gamma, beta, xhat, invstd }, rg))
    }

    /// Normalization with fixed (calibrated) statistics.
    pub fn fixed_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], var: &[T]) -> Result<NodeId> {
        let (x, gamma, beta) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let c = self.norm_operands(x, gamma, beta, "fixed_norm")?;
        if mean.len() != c || var.len() != c {
            return Err(slice_err(self.nodes.len(), "fixed_norm", "statistics length mismatch"));
        }
        let (v, xhat, invstd) = self.normalized(x, gamma, beta, mean, var)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(v, Op::FixedNorm { x, gamma, beta, xhat, invstd }, rg))
    }

    #[allow(clippy::type_complexity)]
    fn normalized(&self, x: usize, gamma: usize, beta: usize, mean: &[T], var: &[T]) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let c = mean.len();
        let eps: T = lit(kernels::BN_EPS);
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        let xv = &self.nodes[x].value;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            for i in 0..c {
                let h = (row[i] - mean[i]) * invstd[i];
                xhat.push(h);
                y.push(h * g[i] + b[i]);
            }
        }
        Ok((Tensor::new(xv.shape().to_vec(), y)?, xhat, invstd))
    }

    /// `[n,h,w,c] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let x = self.check(x)?;
        let [n, h, w, c] = self.nhwc(x, "global_avg_pool")?;
        let data = kernels::global_avg_pool(self.nodes[x].value.data(), n, h * w, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool { x, n, hw: h * w, c }, rg))
    }

    /// Mean cross-entropy where the softmax of each row runs over retained classes
    /// only (`mask[row * c + class]`). A label whose class is masked out is an error.
    pub fn masked_cross_entropy(&mut self, logits: NodeId, mask: &[bool], labels: &[usize]) -> Result<NodeId> {
        let li = self.check(logits)?;
        let s = self.nodes[li].value.shape().to_vec();
        if s.len() != 2 || mask.len() != s[0] * s[1] || labels.len() != s[0] {
            return Err(slice_err(self.nodes.len(), "masked_cross_entropy", "logits/mask/labels disagree"));
        }
        let (n, c) = (s[0], s[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c || !mask[i * c + y] {
                return Err(EasError::MaskedLabel { sample: i, class: y });
            }
        }
        let probs = masked_softmax(self.nodes[li].value.data(), mask, c);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            loss -= probs[i * c + y].ln();
        }
        loss = loss / T::from_usize(n).unwrap();
        let rg = self.rg(li);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy { logits: li, probs, mask: mask.to_vec(), labels: labels.to_vec(), c },
            rg,
        ))
    }

    /// Mean `KL(teacher || student)` over retained classes; `teacher` holds
    /// probabilities already renormalized over the same mask.
    pub fn masked_distill(&mut self, logits: NodeId, teacher: &[T], mask: &[bool]) -> Result<NodeId> {
        let li = self.check(logits)?;
        let s = self.nodes[li].value.shape().to_vec();
        if s.len() != 2 || mask.len() != s[0] * s[1] || teacher.len() != mask.len() {
            return Err(slice_err(self.nodes.len(), "masked_distill", "logits/mask/teacher disagree"));
        }
        let (n, c) = (s[0], s[1]);
        let probs = masked_softmax(self.nodes[li].value.data(), mask, c);
        let mut loss = T::zero();
        for j in 0..n * c {
            if mask[j] && teacher[j] > T::zero() {
                loss += teacher[j] * (teacher[j].ln() - probs[j].ln());
            }
        }
        loss = loss / T::from_usize(n).unwrap();
        let rg = self.rg(li);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedDistill { logits: li, teacher: teacher.to_vec(), probs, mask: mask.to_vec(), c },
            rg,
        ))
    }

    /// Hard threshold `soft > 0.5` whose gradient is passed straight to `soft`.
    pub fn straight_through(&mut self, soft: NodeId, label: &str) -> Result<NodeId> {
        let s = self.check(soft)?;
        let half: T = lit(0.5);
        let v = self.nodes[s].value.map(|v| if v > half { T::one() } else { T::zero() });
        let rg = self.rg(s);
        let id = self.push(v, Op::StraightThrough { soft: s }, rg);
        self.estimators.push((id.idx, label.to_string()));
        Ok(id)
    }

    /// Multilinear polynomial of the entries of a 1-D node, as a `[1]` node.
    pub fn polynomial(&mut self, x: NodeId, terms: Arc<Vec<Monomial>>) -> Result<NodeId> {
        let xi = self.check(x)?;
        let n = self.nodes[xi].value.len();
        if terms.iter().any(|t| t.vars.iter().any(|&v| v >= n)) {
            return Err(slice_err(self.nodes.len(), "polynomial", format!("term refers past {n} variables")));
        }
        let xv = self.nodes[xi].value.data();
        let mut total = T::zero();
        for t in terms.iter() {
            let mut p: T = lit(t.coef);
            for &v in &t.vars {
                p *= xv[v];
            }
            total += p;
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(total), Op::Polynomial { x: xi, terms }, rg))
    }

    /// Reverse pass from a one-element `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not depend on get exact zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(EasError::Backward("backward called before any forward".into()));
        }
        let loss = self.check(loss).map_err(|_| EasError::Backward("loss node is not from the current forward".into()))?;
        if self.consumed {
            return Err(EasError::Backward("backward already ran for this forward; run forward again".into()));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(EasError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![T::one()]);
        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut by_name = BTreeMap::new();
        for (name, &idx) in &self.params {
            let shape = self.nodes[idx].value.shape().to_vec();
            let g = match grads.get_mut(idx).and_then(Option::take) {
                Some(d) => Tensor::new(shape, d)?,
                None => Tensor::zeros(&shape),
            };
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |k: usize| nodes[k].value.data();
        let acc = |k: usize, d: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if !nodes[k].requires_grad {
                return;
            }
            match &mut grads[k] {
                Some(e) => e.iter_mut().zip(d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let out = val(i);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec(), grads);
                acc(*b, g.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec(), grads);
                acc(*b, g.iter().map(|&v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect(), grads);
                acc(*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect(), grads);
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                let vx = val(*x);
                acc(*x, g.iter().map(|&d| d * sv).collect(), grads);
                let ds: T = g.iter().zip(vx).map(|(&d, &v)| d * v).sum();
                acc(*s, vec![ds], grads);
            }
            Op::MulConst { x, c } => acc(*x, g.iter().zip(c).map(|(&d, &k)| d * k).collect(), grads),
            Op::Affine { x, a } => acc(*x, g.iter().map(|&d| d * *a).collect(), grads),
            Op::AddRowBias { x, b } => {
                let m = val(*b).len();
                let mut db = vec![T::zero(); m];
                for row in g.chunks_exact(m) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                acc(*x, g.to_vec(), grads);
                acc(*b, db, grads);
            }
            Op::MatMul { a, b, n, k, m } => {
                if nodes[*a].requires_grad {
                    acc(*a, kernels::matmul_nt(g, val(*b), *n, *m, *k), grads);
                }
                if nodes[*b].requires_grad {
                    acc(*b, kernels::matmul_tn(val(*a), g, *n, *k, *m), grads);
                }
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect(), grads),
            Op::Tanh(x) => acc(*x, g.iter().zip(out).map(|(&d, &y)| d * (T::one() - y * y)).collect(), grads),
            Op::HardSwish(x) => acc(*x, g.iter().zip(val(*x)).map(|(&d, &v)| d * kernels::hardswish_grad(v)).collect(), grads),
            Op::Logit { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &p)| if p < *lo || p > *hi { T::zero() } else { d / (p * (T::one() - p)) })
                    .collect();
                acc(*x, d, grads)
            }
            Op::Square(x) => acc(*x, g.iter().zip(val(*x)).map(|(&d, &v)| d * (v + v)).collect(), grads),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()], grads),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / T::from_usize(n).unwrap(); n], grads)
            }
            Op::Narrow { x, axis, start, len } => {
                let shape = nodes[*x].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let dim = shape[*axis];
                let mut d = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = o * dim * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(src);
                }
                acc(*x, d, grads)
            }
            Op::Concat { xs, axis } => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let len = nodes[x].value.shape()[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    acc(x, d, grads);
                }
            }
            Op::Fill { s } => acc(*s, vec![g.iter().copied().sum()], grads),
            Op::MulChannels { x, m } => {
                let mv = val(*m);
                let c = mv.len();
                let mut dx = g.to_vec();
                let mut dm = vec![T::zero(); c];
                for (row, xrow) in dx.chunks_exact_mut(c).zip(val(*x).chunks_exact(c)) {
                    for j in 0..c {
                        dm[j] += row[j] * xrow[j];
                        row[j] *= mv[j];
                    }
                }
                acc(*x, dx, grads);
                acc(*m, dm, grads);
            }
            Op::Reshape(x) => acc(*x, g.to_vec(), grads),
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, *geom);
                acc(*x, dx, grads);
                acc(*w, dw, grads);
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_backward(val(*x), val(*w), g, *geom);
                acc(*x, dx, grads);
                acc(*w, dw, grads);
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd } => {
                let c = invstd.len();
                let gam = val(*gamma);
                let rows = xhat.len() / c;
                let rn = T::from_usize(rows).unwrap();
                let mut dbeta = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dbeta[j] += grow[j];
                        dgamma[j] += grow[j] * hrow[j];
                    }
                }
                if nodes[*x].requires_grad {
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            let v = gam[j] * invstd[j] / rn * (rn * grow[j] - dbeta[j] - hrow[j] * dgamma[j]);
                            dx.push(v);
                        }
                    }
                    acc(*x, dx, grads);
                }
                acc(*gamma, dgamma, grads);
                acc(*beta, dbeta, grads);
            }
            Op::FixedNorm { x, gamma, beta, xhat, invstd } => {
                let c = invstd.len();
                let gam = val(*gamma);
                let mut dbeta = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                let mut dx = Vec::with_capacity(g.len());
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dbeta[j] += grow[j];
                        dgamma[j] += grow[j] * hrow[j];
                        dx.push(grow[j] * gam[j] * invstd[j]);
                    }
                }
                acc(*x, dx, grads);
                acc(*gamma, dgamma, grads);
                acc(*beta, dbeta, grads);
            }
            Op::GlobalAvgPool { x, n, hw, c } => {
                let inv = T::one() / T::from_usize(*hw).unwrap();
                let mut d = Vec::with_capacity(n * hw * c);
                for b in 0..*n {
                    let grow = &g[b * c..(b + 1) * c];
                    for _ in 0..*hw {
                        d.extend(grow.iter().map(|&v| v * inv));
                    }
                }
                acc(*x, d, grads)
            }
            Op::MaskedCrossEntropy { logits, probs, mask, labels, c } => {
                let n = labels.len();
                let scale = g[0] / T::from_usize(n).unwrap();
                let mut d = vec![T::zero(); probs.len()];
                for (j, dv) in d.iter_mut().enumerate() {
                    if mask[j] {
                        *dv = probs[j] * scale;
                    }
                }
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= scale;
                }
                acc(*logits, d, grads)
            }
            Op::MaskedDistill { logits, teacher, probs, mask, c } => {
                let n = probs.len() / c;
                let scale = g[0] / T::from_usize(n).unwrap();
                let d = (0..probs.len())
                    .map(|j| if mask[j] { (probs[j] - teacher[j]) * scale } else { T::zero() })
                    .collect();
                acc(*logits, d, grads)
            }
            Op::StraightThrough { soft } => acc(*soft, g.to_vec(), grads),
            Op::Polynomial { x, terms } => {
                let xv = val(*x);
                let mut d = vec![T::zero(); xv.len()];
                for t in terms.iter() {
                    for (skip, &v) in t.vars.iter().enumerate() {
                        let mut p: T = lit(t.coef);
                        for (j, &u) in t.vars.iter().enumerate() {
                            if j != skip {
                                p *= xv[u];
                            }
                        }
                        d[v] += p * g[0];
                    }
                }
                acc(*x, d, grads)
            }
        }
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.idx].op.name()
    }
}

/// Row-wise softmax over retained entries; masked entries get probability 0.
pub fn masked_softmax<T: Real>(logits: &[T], mask: &[bool], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for ((orow, lrow), mrow) in out.chunks_exact_mut(c).zip(logits.chunks_exact(c)).zip(mask.chunks_exact(c)) {
        let mx = lrow
            .iter()
            .zip(mrow)
            .filter(|(_, &m)| m)
            .fold(T::neg_infinity(), |a, (&v, _)| a.max(v));
        let mut z = T::zero();
        for j in 0..c {
            if mrow[j] {
                let e = (lrow[j] - mx).exp();
                orow[j] = e;
                z += e;
            }
        }
        for j in 0..c {
            if mrow[j] {
                orow[j] = orow[j] / z;
            }
        }
    }
    out
}
