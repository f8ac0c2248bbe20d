//! Eager reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: each op computes its value when it is added, and
//! [`Graph::backward`] walks the tape in reverse. Gradient contributions to a
//! node from several consumers are summed in ascending consumer order, which
//! makes shared parameters (one autofocus kernel used by K branches)
//! accumulate deterministically in branch order.

mod gradcheck;
mod params;

use std::collections::HashMap;
use std::fmt;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport, FD_STEP};
pub use params::{ParamStore, Parameter};

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{BroadcastMap, PadCrop, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    Softmax { x: NodeId, axis: usize },
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    SelectChannel { x: NodeId, index: usize },
    Concat(Vec<NodeId>),
    Pad { x: NodeId, amounts: Vec<(usize, usize)> },
    Crop { x: NodeId, amounts: Vec<(usize, usize)> },
    BatchNorm(Box<BatchNormTape>),
    Sum(NodeId),
    Mean(NodeId),
    SoftDice(Box<SoftDiceTape>),
}

#[derive(Clone, Debug)]
struct BatchNormTape {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Clone, Debug)]
struct SoftDiceTape {
    probs: NodeId,
    target: Tensor,
    active: Vec<bool>,
    inter: Vec<f64>,
    denom: Vec<f64>,
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BiasAdd(..) => "bias_add",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Conv { .. } => "conv3d",
            Op::SelectChannel { .. } => "select_channel",
            Op::Concat(_) => "concat",
            Op::Pad { .. } => "pad",
            Op::Crop { .. } => "crop",
            Op::BatchNorm(_) => "batchnorm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftDice(_) => "soft_dice",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::BiasAdd(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. } | Op::SelectChannel { x, .. } | Op::Pad { x, .. } | Op::Crop { x, .. } => vec![*x],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(xs) => xs.clone(),
            Op::BatchNorm(t) => vec![t.x, t.gamma, t.beta],
            Op::SoftDice(t) => vec![t.probs],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Input => false,
            Op::Leaf | Op::Param => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node_error(&self, op: &str, message: impl fmt::Display) -> Error {
        Error::Node {
            node: format!("#{} {op}", self.nodes.len()),
            message: message.to_string(),
        }
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Anonymous differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Named trainable parameter. A name may be registered once per graph;
    /// reuse the returned id to share the parameter between several ops.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(self.node_error("param", format!("parameter `{name}` registered twice")));
        }
        let id = self.push(Op::Param, value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b)).map_err(|e| self.node_error("add", e))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b)).map_err(|e| self.node_error("sub", e))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product; `b` may broadcast over the leading and channel axes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b)).map_err(|e| self.node_error("mul", e))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).mul_scalar(s);
        self.push(Op::Scale(x, s), v)
    }

    /// Adds a `[C]` vector along the channel axis of an `N×C×…` tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(self.node_error("bias_add", format!("bias {bs:?} does not match channels of {xs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let add = b[i % c];
            for e in chunk {
                *e += add;
            }
        }
        Ok(self.push(Op::BiasAdd(x, bias), v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        self.push(Op::Relu(x), v)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = softmax_axis(self.value(x), axis).map_err(|e| self.node_error("softmax", e))?;
        Ok(self.push(Op::Softmax { x, axis }, v))
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let bias = b.map(|b| self.value(b));
        let v = conv::forward(self.exec, self.value(x), self.value(w), bias, &geom)
            .map_err(|e| self.node_error("conv3d", e))?;
        Ok(self.push(Op::Conv { x, w, b, geom }, v))
    }

    /// Channel `index` of an `N×C×…` tensor, keeping the axis as extent 1.
    pub fn select_channel(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let src = self.value(x);
        if src.rank() < 2 || index >= src.shape()[1] {
            return Err(self.node_error(
                "select_channel",
                format!("channel {index} out of range for shape {:?}", src.shape()),
            ));
        }
        let mut origin = vec![0; src.rank()];
        origin[1] = index;
        let mut size = src.shape().to_vec();
        size[1] = 1;
        let v = src.slice_block(&origin, &size)?;
        Ok(self.push(Op::SelectChannel { x, index }, v))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or_else(|| self.node_error("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(self.node_error("concat", "inputs must have a channel axis"));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(self.node_error(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?}"),
                ));
            }
            channels += s[1];
        }
        let inner: usize = base[2..].iter().product();
        let mut shape = base.clone();
        shape[1] = channels;
        let mut data = Vec::with_capacity(base[0] * channels * inner);
        for n in 0..base[0] {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let v = Tensor::from_values(&shape, data)?;
        Ok(self.push(Op::Concat(xs.to_vec()), v))
    }

    pub fn pad(&mut self, x: NodeId, amounts: &[(usize, usize)]) -> Result<NodeId> {
        let v = self
            .value(x)
            .pad_crop(amounts, PadCrop::ZeroPad)
            .map_err(|e| self.node_error("pad", e))?;
        Ok(self.push(Op::Pad { x, amounts: amounts.to_vec() }, v))
    }

    pub fn crop(&mut self, x: NodeId, amounts: &[(usize, usize)]) -> Result<NodeId> {
        let v = self
            .value(x)
            .pad_crop(amounts, PadCrop::Crop)
            .map_err(|e| self.node_error("crop", e))?;
        Ok(self.push(Op::Crop { x, amounts: amounts.to_vec() }, v))
    }

    /// Per-channel normalization of an `N×C×…` tensor followed by
    /// `gamma·x̂ + beta`. With `running` set, normalizes with those
    /// statistics (eval mode); otherwise uses batch statistics, which are
    /// returned for the caller's running averages.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<&BatchStats>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() < 2 {
            return Err(self.node_error("batchnorm", "input must have a channel axis"));
        }
        let (n, c) = (s[0], s[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(self.node_error(
                "batchnorm",
                format!("scale/shift must have shape [{c}]"),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let count = (n * inner) as f64;
        let channel_iter = |ch: usize| {
            (0..n).flat_map(move |b| {
                let start = (b * c + ch) * inner;
                start..start + inner
            })
        };
        let data = xv.data();
        let (mean, var, batch) = match running {
            Some(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(self.node_error("batchnorm", "running statistics have wrong length"));
                }
                (stats.mean.clone(), stats.var.clone(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let m = channel_iter(ch).map(|i| data[i]).sum::<f64>() / count;
                    let v = channel_iter(ch).map(|i| (data[i] - m).powi(2)).sum::<f64>() / count;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros_like(xv);
        {
            let xh = xhat.data_mut();
            for ch in 0..c {
                for i in channel_iter(ch) {
                    xh[i] = (data[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        {
            let o = out.data_mut();
            for ch in 0..c {
                for i in channel_iter(ch) {
                    o[i] = g[ch] * o[i] + bt[ch];
                }
            }
        }
        let tape = BatchNormTape {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: running.is_none(),
        };
        Ok((self.push(Op::BatchNorm(Box::new(tape)), out), batch))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum_all());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean_all());
        self.push(Op::Mean(x), v)
    }

    /// Soft dice loss `1 − mean_c 2Σpg / (Σp² + Σg² + eps)` over the classes
    /// flagged in `active`. `probs` and `target` are `N×C×…`; sums pool the
    /// batch and spatial axes.
    pub fn soft_dice(&mut self, probs: NodeId, target: Tensor, active: Vec<bool>, eps: f64) -> Result<NodeId> {
        let p = self.value(probs);
        if p.shape() != target.shape() || p.rank() < 2 {
            return Err(self.node_error(
                "soft_dice",
                format!("probabilities {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let (n, c) = (p.shape()[0], p.shape()[1]);
        if active.len() != c || !active.iter().any(|&a| a) {
            return Err(self.node_error("soft_dice", "class mask must select at least one of the C classes"));
        }
        let inner: usize = p.shape()[2..].iter().product();
        let mut inter = vec![0.0; c];
        let mut denom = vec![eps; c];
        let mut psq = vec![0.0; c];
        let mut gsq = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * inner;
                let pr = &p.data()[start..start + inner];
                let gr = &target.data()[start..start + inner];
                for (pv, gv) in pr.iter().zip(gr) {
                    inter[ch] += pv * gv;
                    psq[ch] += pv * pv;
                    gsq[ch] += gv * gv;
                }
            }
        }
        for ch in 0..c {
            denom[ch] = psq[ch] + gsq[ch] + eps;
        }
        let k = active.iter().filter(|&&a| a).count() as f64;
        let dice: f64 = (0..c)
            .filter(|&ch| active[ch])
            .map(|ch| 2.0 * inter[ch] / denom[ch])
            .sum();
        let v = Tensor::scalar(1.0 - dice / k);
        let tape = SoftDiceTape {
            probs,
            target,
            active,
            inter,
            denom,
        };
        Ok(self.push(Op::SoftDice(Box::new(tape)), v))
    }

    /// Sign of every ReLU input (`> 0`), in tape order. Two evaluations with
    /// equal patterns lie on the same smooth piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|v| v.data().iter().map(|&e| e > 0.0))
            .collect()
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Node {
                node: format!("#{} {}", loss.0, self.nodes[loss.0].op.tag()),
                message: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut pending: Vec<Vec<Tensor>> = vec![Vec::new(); loss.0 + 1];
        pending[loss.0].push(Tensor::scalar(1.0));
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || pending[id].is_empty() {
                continue;
            }
            // contributions arrived from consumers in descending order
            let mut parts = std::mem::take(&mut pending[id]).into_iter().rev();
            let mut g = parts.next().expect("non-empty");
            for p in parts {
                g.add_assign(&p)?;
            }
            for (input, local) in self.local_grads(id, &g)? {
                if self.nodes[input.0].requires_grad {
                    pending[input.0].push(local);
                }
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[id] = Some(g);
            }
        }

        let mut by_param = Vec::new();
        let mut unreachable = Vec::new();
        let mut names: Vec<(&String, &NodeId)> = self.params.iter().collect();
        names.sort_by_key(|(_, id)| **id);
        for (name, id) in names {
            let g = match grads[id.0].take() {
                Some(g) => g,
                None => {
                    unreachable.push(name.clone());
                    Tensor::zeros_like(self.value(*id))
                }
            };
            by_param.push((name.clone(), *id));
            grads[id.0] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: by_param,
            unreachable,
        })
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[id];
        let val = |n: NodeId| &self.nodes[n.0].value;
        let reduce_to = |grad: Tensor, target: NodeId| -> Result<Tensor> {
            let shape = val(target).shape();
            if grad.shape() == shape {
                Ok(grad)
            } else {
                Ok(BroadcastMap::new(grad.shape(), shape)?.reduce_into(&grad, shape))
            }
        };
        Ok(match &node.op {
            Op::Input | Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, reduce_to(g.clone(), *b)?)],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, reduce_to(g.mul_scalar(-1.0), *b)?)],
            Op::Mul(a, b) => {
                let ga = g.mul(val(*b))?;
                let gb = reduce_to(g.mul(val(*a))?, *b)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.mul_scalar(*s))],
            Op::BiasAdd(x, b) => {
                let s = g.shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let mut gb = vec![0.0; c];
                for (i, chunk) in g.data().chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                vec![(*x, g.clone()), (*b, Tensor::from_values(&[c], gb)?)]
            }
            Op::Relu(x) => {
                let gx = g.zip_broadcast(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => vec![(*x, softmax_backward(&node.value, g, *axis)?)],
            Op::Conv { x, w, b, geom } => {
                let mut out = Vec::with_capacity(3);
                if self.nodes[x.0].requires_grad {
                    out.push((*x, conv::backward_input(self.exec, g, val(*w), val(*x).shape(), geom)?));
                }
                if self.nodes[w.0].requires_grad {
                    out.push((*w, conv::backward_weight(self.exec, g, val(*x), geom)?));
                }
                if let Some(b) = b {
                    out.push((*b, conv::backward_bias(g)?));
                }
                out
            }
            Op::SelectChannel { x, index } => {
                let src = val(*x);
                let mut amounts = vec![(0, 0); src.rank()];
                amounts[1] = (*index, src.shape()[1] - index - 1);
                vec![(*x, g.pad_crop(&amounts, PadCrop::ZeroPad)?)]
            }
            Op::Concat(xs) => {
                let mut out = Vec::with_capacity(xs.len());
                let mut start = 0;
                for &x in xs {
                    let shape = val(x).shape();
                    let mut origin = vec![0; shape.len()];
                    origin[1] = start;
                    out.push((x, g.slice_block(&origin, shape)?));
                    start += shape[1];
                }
                out
            }
            Op::Pad { x, amounts } => vec![(*x, g.pad_crop(amounts, PadCrop::Crop)?)],
            Op::Crop { x, amounts } => vec![(*x, g.pad_crop(amounts, PadCrop::ZeroPad)?)],
            Op::BatchNorm(t) => batchnorm_backward(t, val(t.gamma), g)?,
            Op::Sum(x) => vec![(*x, Tensor::fill(val(*x).shape(), g.item()?)?)],
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::fill(val(*x).shape(), g.item()? / n)?)]
            }
            Op::SoftDice(t) => vec![(t.probs, soft_dice_backward(t, val(t.probs), g.item()?)?)],
        })
    }
}

fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(format!("softmax axis {axis} out of range for rank {}", x.rank())));
    }
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let k = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = Tensor::zeros_like(x);
    let src = x.data();
    let dst = out.data_mut();
    let mut buf = vec![0.0; k];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * k + j) * inner + i;
            let m = (0..k).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[at(j)] - m).exp();
                total += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                dst[at(j)] = b / total;
            }
        }
    }
    Ok(out)
}

/// Softmax along `axis` as a plain tensor function.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    softmax_axis(x, axis)
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let s = y.shape();
    let outer: usize = s[..axis].iter().product();
    let k = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = Tensor::zeros_like(y);
    let (yd, gd) = (y.data(), g.data());
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * k + j) * inner + i;
            let dot: f64 = (0..k).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..k {
                dst[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Ok(out)
}

fn batchnorm_backward(t: &BatchNormTape, gamma: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
    let s = g.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let m = (n * inner) as f64;
    let gd = g.data();
    let xh = t.xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let idx = |b: usize, ch: usize| (b * c + ch) * inner;
    for b in 0..n {
        for ch in 0..c {
            let start = idx(b, ch);
            for i in start..start + inner {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * xh[i];
            }
        }
    }
    let gam = gamma.data();
    let mut dx = Tensor::zeros_like(g);
    {
        let d = dx.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let start = idx(b, ch);
                let scale = gam[ch] * t.inv_std[ch];
                for i in start..start + inner {
                    d[i] = if t.train {
                        scale / m * (m * gd[i] - dbeta[ch] - xh[i] * dgamma[ch])
                    } else {
                        scale * gd[i]
                    };
                }
            }
        }
    }
    Ok(vec![
        (t.x, dx),
        (t.gamma, Tensor::from_values(&[c], dgamma)?),
        (t.beta, Tensor::from_values(&[c], dbeta)?),
    ])
}

fn soft_dice_backward(t: &SoftDiceTape, probs: &Tensor, upstream: f64) -> Result<Tensor> {
    let s = probs.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let k = t.active.iter().filter(|&&a| a).count() as f64;
    let mut out = Tensor::zeros_like(probs);
    let (pd, gd) = (probs.data(), t.target.data());
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            if !t.active[ch] {
                continue;
            }
            let (i_c, u_c) = (t.inter[ch], t.denom[ch]);
            let start = (b * c + ch) * inner;
            for i in start..start + inner {
                // d/dp of 2I/U = (2g·U − 2I·2p) / U²
                let d = (2.0 * gd[i] * u_c - 4.0 * i_c * pd[i]) / (u_c * u_c);
                dst[i] = -upstream * d / k;
            }
        }
    }
    Ok(out)
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
    unreachable: Vec<String>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node.
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.of(*id))
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, id)| self.of(*id).map(|g| (n.as_str(), g)))
    }

    /// Parameters the loss does not depend on; their gradient is zero.
    pub fn unreachable(&self) -> &[String] {
        &self.unreachable
    }
}
