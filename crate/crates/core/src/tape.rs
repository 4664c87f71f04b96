//! Reverse-mode automatic differentiation over [`FeatureMap`]s.
//!
//! A [`Graph`] is a Wengert list: every op appends a node holding its output
//! value and enough saved state to run its vector-Jacobian product. Calling
//! [`Graph::backward`] on a scalar node walks the list in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, FeatureMap, Shape};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op families, used to name components in gradient reports and to target
/// fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv,
    Sigmoid,
    Silu,
    Add,
    Mul,
    Affine,
    Softmax,
    Concat,
    Slice,
    Norm,
    Sum,
    Dot,
    Custom,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv => "conv2d",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Softmax => "softmax_channels",
            OpKind::Concat => "concat_channels",
            OpKind::Slice => "split_channels",
            OpKind::Norm => "norm",
            OpKind::Sum => "sum",
            OpKind::Dot => "dot",
            OpKind::Custom => "custom",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        const ALL: [OpKind; 14] = [
            OpKind::Leaf,
            OpKind::Conv,
            OpKind::Sigmoid,
            OpKind::Silu,
            OpKind::Add,
            OpKind::Mul,
            OpKind::Affine,
            OpKind::Softmax,
            OpKind::Concat,
            OpKind::Slice,
            OpKind::Norm,
            OpKind::Sum,
            OpKind::Dot,
            OpKind::Custom,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

/// How the right operand of a binary op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Same shape.
    Exact,
    /// Right is `(N, 1, H, W)`: one mask shared by every channel.
    Channel,
    /// Right is `(N, C, 1, 1)`, or `(1, C, 1, 1)` shared across the batch.
    Spatial { shared_batch: bool },
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    Sigmoid(Var),
    Silu(Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine {
        x: Var,
        scale: f64,
    },
    Softmax(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        local: Vec<Vec<f64>>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Silu(_) => OpKind::Silu,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Norm { .. } => OpKind::Norm,
            Op::Sum(_) => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
            Op::Custom { .. } => OpKind::Custom,
        }
    }
}

struct Node {
    value: FeatureMap,
    op: Op,
    requires_grad: bool,
}

/// Epsilon inside the normalization's square root.
pub const NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep saturated values off the exact endpoints
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

/// Largest f64 below one.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// The tape. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately wrong. Only
    /// useful for checking that gradient verification catches mistakes.
    pub fn with_fault(kind: OpKind) -> Self {
        Graph {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &FeatureMap {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: FeatureMap, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is produced for it.
    pub fn constant(&mut self, value: FeatureMap) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn input(&mut self, value: FeatureMap) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable leaf. Binding the same name twice returns the same node.
    pub fn param(&mut self, name: &str, value: impl FnOnce() -> FeatureMap) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push(value(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let out_shape = spec.output_shape(xs).map_err(|_| Error::shape("conv2d", xs, spec.weight_shape()))?;
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::shape("conv2d weights", self.shape(w), spec.weight_shape()));
        }
        if self.shape(b) != spec.bias_shape() {
            return Err(Error::shape("conv2d bias", self.shape(b), spec.bias_shape()));
        }
        let out = conv_forward(
            self.value(x),
            self.value(w).data(),
            self.value(b).data(),
            &spec,
            out_shape,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv { x, w, b, spec }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let out = FeatureMap::new(xv.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
        let out = FeatureMap::new(xv.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Exact)
        } else if sb == sa.with_c(1) {
            Ok(Bcast::Channel)
        } else if sb == sa.with_hw(1, 1) {
            Ok(Bcast::Spatial { shared_batch: false })
        } else if sb == Shape::new(1, sa.c, 1, 1) {
            Ok(Bcast::Spatial { shared_batch: true })
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    /// Orders operands so the right one is the broadcast side.
    fn ordered(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, Bcast)> {
        match self.bcast(op, a, b) {
            Ok(m) => Ok((a, b, m)),
            Err(e) => match self.bcast(op, b, a) {
                Ok(m) => Ok((b, a, m)),
                Err(_) => Err(e),
            },
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, m) = self.ordered("add", a, b)?;
        let out = binary_forward(self.value(a), self.value(b), m, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b, m), rg))
    }

    /// Elementwise product. One operand may be a 1-channel mask over the
    /// other's channels, or a per-channel scalar over its spatial extent.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, m) = self.ordered("mul", a, b)?;
        let out = binary_forward(self.value(a), self.value(b), m, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b, m), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scale * v + shift).collect();
        let out = FeatureMap::new(xv.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    /// Softmax across all channels at each `(n, h, w)`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.c < 2 {
            return Err(Error::InvalidShape(format!(
                "softmax over channels needs at least 2 channels, got {s}"
            )));
        }
        let xv = self.value(x).data();
        let p = s.plane();
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            let base = n * s.c * p;
            for i in 0..p {
                let mut max = f64::NEG_INFINITY;
                for c in 0..s.c {
                    max = max.max(xv[base + c * p + i]);
                }
                let mut total = 0.0;
                for c in 0..s.c {
                    let e = (xv[base + c * p + i] - max).exp();
                    out[base + c * p + i] = e;
                    total += e;
                }
                for c in 0..s.c {
                    out[base + c * p + i] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(FeatureMap::new(s, out).unwrap(), Op::Softmax(x), rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero maps".into()))?;
        let s0 = self.shape(first);
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::shape("concat_channels", s0, s));
            }
            c_total += s.c;
        }
        let out_shape = s0.with_c(c_total);
        let p = s0.plane();
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &x in xs {
                let v = self.value(x);
                let c = v.shape().c;
                out.extend_from_slice(&v.data()[n * c * p..(n + 1) * c * p]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            FeatureMap::new(out_shape, out).unwrap(),
            Op::Concat(xs.to_vec()),
            rg,
        ))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::InvalidShape(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let p = s.plane();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let from = (n * s.c + start) * p;
            out.extend_from_slice(&xv[from..from + len * p]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            FeatureMap::new(s.with_c(len), out).unwrap(),
            Op::Slice { x, start },
            rg,
        ))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(x);
        if sizes.iter().sum::<usize>() != s.c {
            return Err(Error::InvalidShape(format!(
                "split sizes {sizes:?} do not sum to the channels of {s}"
            )));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Per-`(sample, channel)` standardization over the spatial extent,
    /// followed by a per-channel affine. `gamma` and `beta` are `(1, C, 1, 1)`.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        let ps = Shape::new(1, s.c, 1, 1);
        for v in [gamma, beta] {
            if self.shape(v) != ps {
                return Err(Error::shape("norm affine", self.shape(v), ps));
            }
        }
        let p = s.plane();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; s.numel()];
        let mut inv_std = vec![0.0; s.n * s.c];
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let k = n * s.c + c;
                let plane = &xv[k * p..(k + 1) * p];
                let mean = plane.iter().sum::<f64>() / p as f64;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[k] = is;
                for i in 0..p {
                    let xh = (plane[i] - mean) * is;
                    xhat[k * p + i] = xh;
                    out[k * p + i] = g[c] * xh + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            FeatureMap::new(s, out).unwrap(),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(FeatureMap::scalar(total), Op::Sum(x), rg)
    }

    /// `sum(x * weights)` against a fixed weight map.
    pub fn dot(&mut self, x: Var, weights: &FeatureMap) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::shape("dot", self.shape(x), weights.shape()));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            FeatureMap::scalar(total),
            Op::Dot {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Scalar node with a precomputed local gradient for each input.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, local: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::InvalidShape("custom op: one local gradient per input".into()));
        }
        for (&v, g) in inputs.iter().zip(&local) {
            if g.len() != self.shape(v).numel() {
                return Err(Error::InvalidShape(format!(
                    "custom op: local gradient of length {} for input {}",
                    g.len(),
                    self.shape(v)
                )));
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            FeatureMap::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                local,
            },
            rg,
        ))
    }

    /// Gradients of `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != Shape::SCALAR {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut dy) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                for g in &mut dy {
                    *g *= 1.1;
                }
                if let Some(first) = dy.first_mut() {
                    *first += 0.05;
                }
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.shape().numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let os = node.value.shape();
                if self.nodes[x.0].requires_grad {
                    acc(*x, &mut |gx| conv_backward_input(dy, wv, spec, xv.shape(), os, gx));
                }
                acc(*w, &mut |gw| conv_backward_weight(dy, xv, spec, os, gw));
                acc(*b, &mut |gb| {
                    let p = os.plane();
                    for n in 0..os.n {
                        for o in 0..os.c {
                            let s = (n * os.c + o) * p;
                            gb[o] += dy[s..s + p].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let s = sigmoid_scalar(xv[i]);
                        gx[i] += dy[i] * (s + xv[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Add(a, b, m) => {
                acc(*a, &mut |ga| {
                    for (g, d) in ga.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                let sa = self.shape(*a);
                acc(*b, &mut |gb| {
                    bcast_visit(sa, *m, |ia, ib| gb[ib] += dy[ia]);
                });
            }
            Op::Mul(a, b, m) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let sa = self.shape(*a);
                acc(*a, &mut |ga| {
                    bcast_visit(sa, *m, |ia, ib| ga[ia] += dy[ia] * bv[ib]);
                });
                acc(*b, &mut |gb| {
                    bcast_visit(sa, *m, |ia, ib| gb[ib] += dy[ia] * av[ia]);
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |gx| {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += scale * d;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let s = node.value.shape();
                let p = s.plane();
                acc(*x, &mut |gx| {
                    for n in 0..s.n {
                        let base = n * s.c * p;
                        for i in 0..p {
                            let mut dot = 0.0;
                            for c in 0..s.c {
                                let k = base + c * p + i;
                                dot += y[k] * dy[k];
                            }
                            for c in 0..s.c {
                                let k = base + c * p + i;
                                gx[k] += y[k] * (dy[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let s = node.value.shape();
                let p = s.plane();
                let mut c_off = 0;
                for &x in xs {
                    let cx = self.shape(x).c;
                    acc(x, &mut |gx| {
                        for n in 0..s.n {
                            let src = (n * s.c + c_off) * p;
                            let dst = n * cx * p;
                            for i in 0..cx * p {
                                gx[dst + i] += dy[src + i];
                            }
                        }
                    });
                    c_off += cx;
                }
            }
            Op::Slice { x, start } => {
                let sx = self.shape(*x);
                let len = node.value.shape().c;
                let p = sx.plane();
                acc(*x, &mut |gx| {
                    for n in 0..sx.n {
                        let dst = (n * sx.c + start) * p;
                        let src = n * len * p;
                        for i in 0..len * p {
                            gx[dst + i] += dy[src + i];
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let p = s.plane();
                let g = self.value(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = (n * s.c + c) * p;
                            gg[c] += (0..p).map(|i| dy[k + i] * xhat[k + i]).sum::<f64>();
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = (n * s.c + c) * p;
                            gb[c] += dy[k..k + p].iter().sum::<f64>();
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let pf = p as f64;
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let j = n * s.c + c;
                            let k = j * p;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for i in 0..p {
                                let d = dy[k + i] * g[c];
                                sum_d += d;
                                sum_dx += d * xhat[k + i];
                            }
                            for i in 0..p {
                                let d = dy[k + i] * g[c];
                                gx[k + i] += inv_std[j] * (d - sum_d / pf - xhat[k + i] * sum_dx / pf);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| {
                    for g in gx.iter_mut() {
                        *g += dy[0];
                    }
                });
            }
            Op::Dot { x, weights } => {
                acc(*x, &mut |gx| {
                    for (g, w) in gx.iter_mut().zip(weights) {
                        *g += dy[0] * w;
                    }
                });
            }
            Op::Custom { inputs, local } => {
                for (&v, l) in inputs.iter().zip(local) {
                    acc(v, &mut |gv| {
                        for (g, d) in gv.iter_mut().zip(l) {
                            *g += dy[0] * d;
                        }
                    });
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not influence the loss or
    /// does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but zero-filled for unreached inputs.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> FeatureMap {
        let shape = graph.shape(v);
        match self.get(v) {
            Some(g) => FeatureMap::new(shape, g.to_vec()).unwrap(),
            None => FeatureMap::zeros(shape),
        }
    }
}

fn binary_forward(a: &FeatureMap, b: &FeatureMap, m: Bcast, f: impl Fn(f64, f64) -> f64) -> FeatureMap {
    let s = a.shape();
    let av = a.data();
    let bv = b.data();
    let mut out = vec![0.0; s.numel()];
    bcast_visit(s, m, |ia, ib| out[ia] = f(av[ia], bv[ib]));
    FeatureMap::new(s, out).unwrap()
}

/// Calls `f(index_in_a, index_in_b)` for every element of `a`.
#[inline]
fn bcast_visit(sa: Shape, m: Bcast, mut f: impl FnMut(usize, usize)) {
    let p = sa.plane();
    match m {
        Bcast::Exact => {
            for i in 0..sa.numel() {
                f(i, i);
            }
        }
        Bcast::Channel => {
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let ba = (n * sa.c + c) * p;
                    let bb = n * p;
                    for i in 0..p {
                        f(ba + i, bb + i);
                    }
                }
            }
        }
        Bcast::Spatial { shared_batch } => {
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let ba = (n * sa.c + c) * p;
                    let ib = if shared_batch { c } else { n * sa.c + c };
                    for i in 0..p {
                        f(ba + i, ib);
                    }
                }
            }
        }
    }
}

/// Range of output columns `o` with `0 <= o * stride + k - pad < len`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

// Ungrouped convolutions go through im2col and a GEMM; grouped ones
// (depthwise in practice) are cheap enough for direct loops.

/// Whether the input plane itself is the column matrix.
fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

/// Column matrix `[C * k * k, OH * OW]` of one image.
fn im2col(x: &[f64], xs: Shape, spec: &ConvSpec, os: Shape, col: &mut [f64]) {
    let (k, st, pad) = (spec.kernel, spec.stride, spec.padding);
    let p = os.plane();
    col.fill(0.0);
    for c in 0..xs.c {
        let iplane = &x[c * xs.plane()..(c + 1) * xs.plane()];
        for kh in 0..k {
            let (oh0, oh1) = valid_range(os.h, xs.h, st, kh, pad);
            for kw in 0..k {
                let (ow0, ow1) = valid_range(os.w, xs.w, st, kw, pad);
                let row = &mut col[((c * k + kh) * k + kw) * p..][..p];
                for oh in oh0..oh1 {
                    let irow = &iplane[(oh * st + kh - pad) * xs.w..][..xs.w];
                    let orow = &mut row[oh * os.w..(oh + 1) * os.w];
                    for ow in ow0..ow1 {
                        orow[ow] = irow[ow * st + kw - pad];
                    }
                }
            }
        }
    }
}

/// Adds a column-matrix gradient back onto the input plane layout.
fn col2im(col: &[f64], xs: Shape, spec: &ConvSpec, os: Shape, gx: &mut [f64]) {
    let (k, st, pad) = (spec.kernel, spec.stride, spec.padding);
    let p = os.plane();
    for c in 0..xs.c {
        let gplane = &mut gx[c * xs.plane()..(c + 1) * xs.plane()];
        for kh in 0..k {
            let (oh0, oh1) = valid_range(os.h, xs.h, st, kh, pad);
            for kw in 0..k {
                let (ow0, ow1) = valid_range(os.w, xs.w, st, kw, pad);
                let row = &col[((c * k + kh) * k + kw) * p..][..p];
                for oh in oh0..oh1 {
                    let grow = &mut gplane[(oh * st + kh - pad) * xs.w..][..xs.w];
                    let drow = &row[oh * os.w..(oh + 1) * os.w];
                    for ow in ow0..ow1 {
                        grow[ow * st + kw - pad] += drow[ow];
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k` (strides given), `b: k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents of every
    // operand; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(x: &FeatureMap, w: &[f64], b: &[f64], spec: &ConvSpec, os: Shape) -> FeatureMap {
    if spec.groups != 1 {
        return direct_forward(x, w, b, spec, os);
    }
    let xs = x.shape();
    let (j, p) = (xs.c * spec.kernel * spec.kernel, os.plane());
    let mut out = vec![0.0; os.numel()];
    let mut col = vec![0.0; if is_plain_pointwise(spec) { 0 } else { j * p }];
    for n in 0..xs.n {
        let xn = &x.data()[n * xs.c * xs.plane()..][..xs.c * xs.plane()];
        let on = &mut out[n * os.c * p..][..os.c * p];
        for (o, plane) in on.chunks_mut(p).enumerate() {
            plane.fill(b[o]);
        }
        let cols = if is_plain_pointwise(spec) {
            xn
        } else {
            im2col(xn, xs, spec, os, &mut col);
            &col
        };
        gemm(os.c, j, p, w, j as isize, 1, cols, p as isize, 1, 1.0, on);
    }
    FeatureMap::new(os, out).unwrap()
}

fn conv_backward_input(dy: &[f64], w: &[f64], spec: &ConvSpec, xs: Shape, os: Shape, gx: &mut [f64]) {
    if spec.groups != 1 {
        return direct_backward_input(dy, w, spec, xs, os, gx);
    }
    let (j, p) = (xs.c * spec.kernel * spec.kernel, os.plane());
    let mut col = vec![0.0; j * p];
    for n in 0..xs.n {
        let dn = &dy[n * os.c * p..][..os.c * p];
        let gn = &mut gx[n * xs.c * xs.plane()..][..xs.c * xs.plane()];
        if is_plain_pointwise(spec) {
            gemm(j, os.c, p, w, 1, j as isize, dn, p as isize, 1, 1.0, gn);
        } else {
            gemm(j, os.c, p, w, 1, j as isize, dn, p as isize, 1, 0.0, &mut col);
            col2im(&col, xs, spec, os, gn);
        }
    }
}

fn conv_backward_weight(dy: &[f64], x: &FeatureMap, spec: &ConvSpec, os: Shape, gw: &mut [f64]) {
    if spec.groups != 1 {
        return direct_backward_weight(dy, x, spec, os, gw);
    }
    let xs = x.shape();
    let (j, p) = (xs.c * spec.kernel * spec.kernel, os.plane());
    let mut col = vec![0.0; if is_plain_pointwise(spec) { 0 } else { j * p }];
    for n in 0..xs.n {
        let xn = &x.data()[n * xs.c * xs.plane()..][..xs.c * xs.plane()];
        let dn = &dy[n * os.c * p..][..os.c * p];
        let cols = if is_plain_pointwise(spec) {
            xn
        } else {
            im2col(xn, xs, spec, os, &mut col);
            &col
        };
        gemm(os.c, p, j, dn, p as isize, 1, cols, 1, p as isize, 1.0, gw);
    }
}

fn direct_forward(x: &FeatureMap, w: &[f64], b: &[f64], spec: &ConvSpec, os: Shape) -> FeatureMap {
    let xs = x.shape();
    let xv = x.data();
    let (k, st, pad) = (spec.kernel, spec.stride, spec.padding);
    let (ipg, opg) = (spec.in_per_group(), spec.out_per_group());
    let (ip, op) = (xs.plane(), os.plane());
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        for o in 0..os.c {
            let g = o / opg;
            let ob = (n * os.c + o) * op;
            let oplane = &mut out[ob..ob + op];
            oplane.fill(b[o]);
            for ic in 0..ipg {
                let c = g * ipg + ic;
                let iplane = &xv[(n * xs.c + c) * ip..(n * xs.c + c + 1) * ip];
                let wb = (o * ipg + ic) * k * k;
                if k == 1 && st == 1 && pad == 0 {
                    let wv = w[wb];
                    for (ov, iv) in oplane.iter_mut().zip(iplane) {
                        *ov += wv * iv;
                    }
                    continue;
                }
                for kh in 0..k {
                    let (oh0, oh1) = valid_range(os.h, xs.h, st, kh, pad);
                    for kw in 0..k {
                        let wv = w[wb + kh * k + kw];
                        let (ow0, ow1) = valid_range(os.w, xs.w, st, kw, pad);
                        for oh in oh0..oh1 {
                            let ih = oh * st + kh - pad;
                            let orow = &mut oplane[oh * os.w..(oh + 1) * os.w];
                            let irow = &iplane[ih * xs.w..(ih + 1) * xs.w];
                            for ow in ow0..ow1 {
                                orow[ow] += wv * irow[ow * st + kw - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    FeatureMap::new(os, out).unwrap()
}

fn direct_backward_input(dy: &[f64], w: &[f64], spec: &ConvSpec, xs: Shape, os: Shape, gx: &mut [f64]) {
    let (k, st, pad) = (spec.kernel, spec.stride, spec.padding);
    let (ipg, opg) = (spec.in_per_group(), spec.out_per_group());
    let (ip, op) = (xs.plane(), os.plane());
    for n in 0..xs.n {
        for o in 0..os.c {
            let g = o / opg;
            let ob = (n * os.c + o) * op;
            let dplane = &dy[ob..ob + op];
            for ic in 0..ipg {
                let c = g * ipg + ic;
                let gb = (n * xs.c + c) * ip;
                let gplane = &mut gx[gb..gb + ip];
                let wb = (o * ipg + ic) * k * k;
                if k == 1 && st == 1 && pad == 0 {
                    let wv = w[wb];
                    for (gv, dv) in gplane.iter_mut().zip(dplane) {
                        *gv += wv * dv;
                    }
                    continue;
                }
                for kh in 0..k {
                    let (oh0, oh1) = valid_range(os.h, xs.h, st, kh, pad);
                    for kw in 0..k {
                        let wv = w[wb + kh * k + kw];
                        let (ow0, ow1) = valid_range(os.w, xs.w, st, kw, pad);
                        for oh in oh0..oh1 {
                            let ih = oh * st + kh - pad;
                            let drow = &dplane[oh * os.w..(oh + 1) * os.w];
                            let grow = &mut gplane[ih * xs.w..(ih + 1) * xs.w];
                            for ow in ow0..ow1 {
                                grow[ow * st + kw - pad] += wv * drow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn direct_backward_weight(dy: &[f64], x: &FeatureMap, spec: &ConvSpec, os: Shape, gw: &mut [f64]) {
    let xs = x.shape();
    let xv = x.data();
    let (k, st, pad) = (spec.kernel, spec.stride, spec.padding);
    let (ipg, opg) = (spec.in_per_group(), spec.out_per_group());
    let (ip, op) = (xs.plane(), os.plane());
    for n in 0..xs.n {
        for o in 0..os.c {
            let g = o / opg;
            let ob = (n * os.c + o) * op;
            let dplane = &dy[ob..ob + op];
            for ic in 0..ipg {
                let c = g * ipg + ic;
                let iplane = &xv[(n * xs.c + c) * ip..(n * xs.c + c + 1) * ip];
                let wb = (o * ipg + ic) * k * k;
                if k == 1 && st == 1 && pad == 0 {
                    gw[wb] += dplane.iter().zip(iplane).map(|(d, i)| d * i).sum::<f64>();
                    continue;
                }
                for kh in 0..k {
                    let (oh0, oh1) = valid_range(os.h, xs.h, st, kh, pad);
                    for kw in 0..k {
                        let (ow0, ow1) = valid_range(os.w, xs.w, st, kw, pad);
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * st + kh - pad;
                            let drow = &dplane[oh * os.w..(oh + 1) * os.w];
                            let irow = &iplane[ih * xs.w..(ih + 1) * xs.w];
                            for ow in ow0..ow1 {
                                acc += drow[ow] * irow[ow * st + kw - pad];
                            }
                        }
                        gw[wb + kh * k + kw] += acc;
                    }
                }
            }
        }
    }
}
