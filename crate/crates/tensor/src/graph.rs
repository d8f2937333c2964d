//! Tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node
//! holding its output value; [`Graph::backward`] walks the tape in reverse
//! and accumulates parameter gradients into a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry, PoolGeometry, ResizeMode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geo: ConvGeometry },
    ChannelBias { x: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geo: PoolGeometry },
    GlobalAvgPool { x: Var },
    Softmax { x: Var, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Concat { parts: Vec<Var> },
    BroadcastMul { x: Var, mask: Var },
    Resize { x: Var, mode: ResizeMode },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Affine { x: Var, scale: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    ChannelCosine { a: Var, b: Var, eps: f64 },
    Bce { p: Var, target: Tensor, eps: f64 },
    Sum(Var),
    Mean(Var),
    GroupNorm { x: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    /// Outputs of every `detach` call, in call order.
    detached: Vec<Tensor>,
    /// When set, `detach` returns these values instead, in call order.
    replay: Option<Vec<Tensor>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Tensor::from_vec(&self.shapes[var.0], g.clone()).ok()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    t.dims4()
        .map_err(|_| TensorError::shape(op, format!("expected [B,C,H,W], got {:?}", t.shape())))
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Moves axis `perm[i]` of the input to position `i` of the output.
fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let offset: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for axis in (0..idx.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    (out_shape, out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, parents: &[Var]) -> Result<Var> {
        check_finite(op, value.data())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("input", value.data())?;
        Ok(self.leaf(value, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.input(value, false)
    }

    /// Binds a stored parameter. Repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.detached.len();
        let value = match self.replay.as_ref().and_then(|r| r.get(n)) {
            Some(frozen) if frozen.shape() == self.shape(v) => frozen.clone(),
            _ => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        self.leaf(value, false)
    }

    /// A graph whose `detach` calls yield `values` in order, so a detached
    /// quantity stays constant across re-evaluations.
    pub(crate) fn replaying(values: Vec<Tensor>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
    }

    pub(crate) fn take_detached(&mut self) -> Vec<Tensor> {
        std::mem::take(&mut self.detached)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: (usize, usize)) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(k), stride, padding)?;
        let out = kernels::conv2d_forward(&geo, self.value(x).data(), self.value(k).data());
        let value = Tensor::from_vec(&geo.out_shape(), out)?;
        self.push("conv2d", value, Op::Conv2d { x, k, geo }, &[x, k])
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, h, w) = rank4("add_channel_bias", self.value(x))?;
        if self.value(b).numel() != c {
            return Err(TensorError::shape(
                "add_channel_bias",
                format!("bias has {} values for {c} channels", self.value(b).numel()),
            ));
        }
        let hw = h * w;
        let bias = self.value(b).data();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            let add = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        self.push("add_channel_bias", value, Op::ChannelBias { x, b }, &[x, b])
    }

    /// Multiplies channel `c` by `s[c]` (shared over the batch) or by
    /// `s[b, c]` when `s` holds one value per batch item and channel.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, h, w) = rank4("scale_channels", self.value(x))?;
        let n = self.value(s).numel();
        if n != c && n != b * c {
            return Err(TensorError::shape(
                "scale_channels",
                format!("scale has {n} values for {b}x{c} channels"),
            ));
        }
        let hw = h * w;
        let scale = self.value(s).data();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            let m = scale[i % n];
            chunk.iter_mut().for_each(|v| *v *= m);
        }
        self.push("scale_channels", value, Op::ScaleChannels { x, s }, &[x, s])
    }

    pub fn max_pool2d(&mut self, x: Var, window: (usize, usize), stride: usize) -> Result<Var> {
        let geo = PoolGeometry::new(self.shape(x), window, stride)?;
        let (b, c, _, _) = rank4("max_pool2d", self.value(x))?;
        let (ho, wo) = geo.out_extents();
        let (out, argmax) = kernels::max_pool_forward(&geo, self.value(x).data());
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        self.push("max_pool2d", value, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, window: (usize, usize), stride: usize) -> Result<Var> {
        let geo = PoolGeometry::new(self.shape(x), window, stride)?;
        let (b, c, _, _) = rank4("avg_pool2d", self.value(x))?;
        let (ho, wo) = geo.out_extents();
        let value = Tensor::from_vec(&[b, c, ho, wo], kernels::avg_pool_forward(&geo, self.value(x).data()))?;
        self.push("avg_pool2d", value, Op::AvgPool { x, geo }, &[x])
    }

    /// Adaptive average pooling to `[B, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = rank4("global_avg_pool", self.value(x))?;
        let hw = (h * w) as f64;
        let out = self.value(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let value = Tensor::from_vec(&[b, c, 1, 1], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x }, &[x])
    }

    /// Max pooling over the full spatial extent, giving `[B, C, 1, 1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = rank4("global_max_pool", self.value(x))?;
        self.max_pool2d(x, (h, w), 1)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let out = kernels::softmax_forward(&shape, axis, self.value(x).data());
        let value = Tensor::from_vec(&shape, out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        self.push(op, value, kind, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value, kind, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::shape("clamp", format!("empty range [{lo}, {hi}]")));
        }
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Concatenates `[B, C_k, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::shape("concat_channels", "nothing to concatenate"))?;
        let (b, _, h, w) = rank4("concat_channels", self.value(first))?;
        let mut channels = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = rank4("concat_channels", self.value(p))?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(p), self.shape(first)),
                ));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(b * channels * h * w);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let per = t.numel() / b;
                data.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
            }
        }
        let value = Tensor::from_vec(&[b, channels, h, w], data)?;
        self.push("concat_channels", value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Multiplies `[B, C, H, W]` by a single-channel `[B, 1, H, W]` map.
    pub fn broadcast_mul(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (b, c, h, w) = rank4("broadcast_mul", self.value(x))?;
        if self.shape(mask) != [b, 1, h, w] {
            return Err(TensorError::shape(
                "broadcast_mul",
                format!("mask {:?} does not broadcast over {:?}", self.shape(mask), self.shape(x)),
            ));
        }
        let hw = h * w;
        let m = self.value(mask).data();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            let plane = &m[(i / c) * hw..][..hw];
            chunk.iter_mut().zip(plane).for_each(|(v, mv)| *v *= mv);
        }
        self.push("broadcast_mul", value, Op::BroadcastMul { x, mask }, &[x, mask])
    }

    pub fn resize(&mut self, x: Var, extents: (usize, usize), mode: ResizeMode) -> Result<Var> {
        let value = kernels::resize(self.value(x), extents, mode)?;
        self.push("resize", value, Op::Resize { x, mode }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, data) = permute_data(&shape, self.value(x).data(), perm);
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push("permute", value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Cosine similarity across channels at every position of two
    /// `[B, C, H, W]` tensors, giving `[B, 1, H, W]`.
    ///
    /// The norm product is floored at `eps`; a zero vector yields 0.
    pub fn channel_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        same_shape("channel_cosine", self.value(a), self.value(b))?;
        let (bs, c, h, w) = rank4("channel_cosine", self.value(a))?;
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * hw);
        for bi in 0..bs {
            for p in 0..hw {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let i = (bi * c + ch) * hw + p;
                    dot += av[i] * bv[i];
                    na += av[i] * av[i];
                    nb += bv[i] * bv[i];
                }
                out.push(dot / (na.sqrt() * nb.sqrt()).max(eps));
            }
        }
        let value = Tensor::from_vec(&[bs, 1, h, w], out)?;
        self.push("channel_cosine", value, Op::ChannelCosine { a, b, eps }, &[a, b])
    }

    /// Mean binary cross-entropy of probabilities `p` against fixed targets,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
        same_shape("bce", self.value(p), target)?;
        let n = target.numel() as f64;
        let loss: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let pc = pv.clamp(eps, 1.0 - eps);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce {
            p,
            target: target.clone(),
            eps,
        };
        self.push("bce", Tensor::scalar(loss), op, &[p])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Group normalization without affine terms.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (b, c, h, w) = rank4("group_norm", self.value(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::shape("group_norm", format!("{groups} groups do not divide {c} channels")));
        }
        let n = c / groups * h * w;
        let src = self.value(x).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(b * groups);
        for chunk in src.chunks(n) {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(chunk.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::from_vec(&[b, c, h, w], xhat.clone())?;
        let op = Op::GroupNorm { x, groups, xhat, inv_std };
        self.push("group_norm", value, op, &[x])
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `store`. Gradients accumulate across calls until zeroed.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                let param = store.get_mut(name)?;
                if param.grad.numel() != g.len() {
                    return Err(TensorError::shape("backward", format!("parameter `{name}` changed shape")));
                }
                param.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(grads)
    }

    /// Computes gradients of `loss` with respect to every node without
    /// touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geo } => {
                let (xv, kv) = (val(*x), val(*k));
                acc(*x, &mut |gx| kernels::conv2d_backward(geo, xv, kv, g, Some(gx), None));
                acc(*k, &mut |gk| kernels::conv2d_backward(geo, xv, kv, g, None, Some(gk)));
            }
            Op::ChannelBias { x, b } => {
                let c = node.value.shape()[1];
                let hw = node.value.numel() / (node.value.shape()[0] * c);
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for (j, chunk) in g.chunks(hw).enumerate() {
                        gb[j % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::ScaleChannels { x, s } => {
                let shape = node.value.shape();
                let hw = shape[2] * shape[3];
                let (xv, sv) = (val(*x), val(*s));
                let n = sv.len();
                acc(*x, &mut |gx| {
                    for (j, (gxc, gc)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        gxc.iter_mut().zip(gc).for_each(|(a, b)| *a += b * sv[j % n]);
                    }
                });
                acc(*s, &mut |gs| {
                    for (j, (xc, gc)) in xv.chunks(hw).zip(g.chunks(hw)).enumerate() {
                        gs[j % n] += xc.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |gx| {
                for (&at, gv) in argmax.iter().zip(g) {
                    gx[at] += gv;
                }
            }),
            Op::AvgPool { x, geo } => acc(*x, &mut |gx| kernels::avg_pool_backward(geo, g, gx)),
            Op::GlobalAvgPool { x } => {
                let hw = self.nodes[x.0].value.numel() / g.len();
                acc(*x, &mut |gx| {
                    for (chunk, gv) in gx.chunks_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv / hw as f64);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                acc(*x, &mut |gx| kernels::softmax_backward(node.value.shape(), *axis, y, g, gx));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| zip3(ga, g, bv, |gv, o| gv * o));
                acc(*b, &mut |gb| zip3(gb, g, av, |gv, o| gv * o));
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| zip3(gx, g, xv, |gv, v| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 }));
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| zip3(gx, g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| zip3(gx, g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(x) => acc(*x, &mut |gx| zip3(gx, g, y, |gv, t| gv * (1.0 - t * t))),
            Op::Concat { parts } => {
                let b = node.value.shape()[0];
                let per_out = node.value.numel() / b;
                let mut offset = 0;
                for &p in parts {
                    let per = self.nodes[p.0].value.numel() / b;
                    acc(p, &mut |gp| {
                        for bi in 0..b {
                            add_into(&mut gp[bi * per..(bi + 1) * per], &g[bi * per_out + offset..][..per]);
                        }
                    });
                    offset += per;
                }
            }
            Op::BroadcastMul { x, mask } => {
                let shape = node.value.shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let (xv, mv) = (val(*x), val(*mask));
                acc(*x, &mut |gx| {
                    for (j, (gxc, gc)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        zip3(gxc, gc, &mv[(j / c) * hw..][..hw], |gv, m| gv * m);
                    }
                });
                acc(*mask, &mut |gm| {
                    for (j, (xc, gc)) in xv.chunks(hw).zip(g.chunks(hw)).enumerate() {
                        let dst = &mut gm[(j / c) * hw..][..hw];
                        for ((d, xv), gv) in dst.iter_mut().zip(xc).zip(gc) {
                            *d += xv * gv;
                        }
                    }
                });
            }
            Op::Resize { x, mode } => {
                let src = self.nodes[x.0].value.shape();
                let dst = node.value.shape();
                acc(*x, &mut |gx| {
                    kernels::resize_backward(src[0] * src[1], (src[2], src[3]), (dst[2], dst[3]), *mode, g, gx)
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(node.value.shape(), g, &inverse);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::Affine { x, scale } => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * scale)),
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |gx| zip3(gx, g, xv, |gv, v| if v >= *lo && v <= *hi { gv } else { 0.0 }));
            }
            Op::ChannelCosine { a, b, eps } => {
                let shape = self.nodes[a.0].value.shape();
                let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..bs {
                    for p in 0..hw {
                        let idx = |ch: usize| (bi * c + ch) * hw + p;
                        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            dot += av[idx(ch)] * bv[idx(ch)];
                            na += av[idx(ch)] * av[idx(ch)];
                            nb += bv[idx(ch)] * bv[idx(ch)];
                        }
                        let (na, nb) = (na.sqrt(), nb.sqrt());
                        let gv = g[bi * hw + p];
                        let denom = na * nb;
                        if denom > *eps {
                            let cos = dot / denom;
                            for ch in 0..c {
                                let (x, z) = (av[idx(ch)], bv[idx(ch)]);
                                ga[idx(ch)] = gv * (z / denom - cos * x / (na * na));
                                gb[idx(ch)] = gv * (x / denom - cos * z / (nb * nb));
                            }
                        } else {
                            for ch in 0..c {
                                ga[idx(ch)] = gv * bv[idx(ch)] / eps;
                                gb[idx(ch)] = gv * av[idx(ch)] / eps;
                            }
                        }
                    }
                }
                acc(*a, &mut |d| add_into(d, &ga));
                acc(*b, &mut |d| add_into(d, &gb));
            }
            Op::Bce { p, target, eps } => {
                let pv = val(*p);
                let scale = g[0] / target.numel() as f64;
                acc(*p, &mut |gp| {
                    for ((d, &pr), &t) in gp.iter_mut().zip(pv).zip(target.data()) {
                        if pr >= *eps && pr <= 1.0 - eps {
                            *d += scale * (pr - t) / (pr * (1.0 - pr));
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::GroupNorm { x, groups, xhat, inv_std } => {
                let n = xhat.len() / inv_std.len();
                debug_assert_eq!(inv_std.len() % groups, 0);
                acc(*x, &mut |gx| {
                    for (((dst, gc), xc), inv) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).zip(inv_std) {
                        let sum_g: f64 = gc.iter().sum();
                        let sum_gx: f64 = gc.iter().zip(xc).map(|(a, b)| a * b).sum();
                        for ((d, gv), xv) in dst.iter_mut().zip(gc).zip(xc) {
                            *d += inv / n as f64 * (n as f64 * gv - sum_g - xv * sum_gx);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += f(gv, o);
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[1.0, 2.0, 3.0]);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true).unwrap();
        let mut store = ParamStore::new();
        assert_eq!(g.backward(x, &mut store).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[f64::MAX]), false).unwrap();
        assert_eq!(g.affine(x, 10.0, 0.0).unwrap_err(), TensorError::NonFinite { op: "affine" });
        assert!(g.input(t(&[1], &[f64::NAN]), false).is_err());
    }

    #[test]
    fn shared_param_node() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[1], &[3.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let sq = g.mul(a, b).unwrap();
        g.backward(sq, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-2.0, 0.0, 5.0]), true).unwrap();
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 1.0]), true).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.gradients(s).unwrap().get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true).unwrap();
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.gradients(s).unwrap().get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 4], |i| i as f64), false).unwrap();
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] of the permuted tensor is x[i, j, k]
        assert_eq!(g.value(p).data()[(2 + 1) * 3 + 2], g.value(x).data()[(3 + 2) * 4 + 1]);
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(q), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn broadcast_mul_rejects_multichannel_mask() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 2, 2]), false).unwrap();
        let m = g.input(Tensor::zeros(&[1, 2, 2, 2]), false).unwrap();
        assert!(g.broadcast_mul(x, m).is_err());
        let y = g.input(Tensor::zeros(&[1, 2, 2, 2]), false).unwrap();
        assert!(g.add(x, y).is_err());
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[1, 3, 1, 1]), false).unwrap();
        let b = g.input(t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]), false).unwrap();
        let c = g.channel_cosine(a, b, 1e-8).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
