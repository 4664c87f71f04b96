//! Trainable parameters and the small layers every fusion module is built from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{ConvSpec, FeatureMap, Shape};

/// Gate-producing convolutions start with weights shrunk by this factor so
/// sigmoid gates begin near 0.5 and softmax weights near uniform.
pub const GATE_INIT_SCALE: f64 = 0.1;

pub const CHECKPOINT_HEADER: &str = "pacg-ckpt v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize, gate: bool },
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
}

/// Anything that owns trainable arrays.
pub trait Module {
    fn declare(&self, out: &mut Vec<ParamDecl>);

    fn param_decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        self.declare(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: FeatureMap,
    pub grad: Vec<f64>,
}

/// Named trainable arrays with gradient slots, keyed by hierarchical name
/// such as `scg.p3.rgb_refiner.dw.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Param>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParameterSet {
    /// Seeded initialization. Each array draws from its own stream keyed by
    /// `(seed, name)`, so a parameter's initial value does not depend on which
    /// other modules exist.
    pub fn init(decls: &[ParamDecl], seed: u64) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for d in decls {
            let value = match d.kind {
                ParamKind::ConvWeight { fan_in, gate } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(d.name.as_bytes()));
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let scale = if gate { GATE_INIT_SCALE } else { 1.0 };
                    let data = (0..d.shape.numel())
                        .map(|_| scale * rng.random_range(-bound..bound))
                        .collect();
                    FeatureMap::new(d.shape, data)?
                }
                ParamKind::Bias | ParamKind::NormShift => FeatureMap::zeros(d.shape),
                ParamKind::NormScale => FeatureMap::full(d.shape, 1.0),
            };
            let grad = vec![0.0; d.shape.numel()];
            if entries.insert(d.name.clone(), Param { value, grad }).is_some() {
                return Err(Error::Config(format!("parameter {} registered twice", d.name)));
            }
        }
        Ok(ParameterSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.value.shape().numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&FeatureMap> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        p.value = FeatureMap::new(p.value.shape(), data)?;
        Ok(())
    }

    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let n = self.value(name)?.shape().numel();
        self.set(name, vec![value; n])
    }

    /// Sets every parameter whose name starts with `prefix`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.value = FeatureMap::full(p.value.shape(), value);
            }
        }
    }

    /// Binds the named array into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let value = self.value(name)?;
        Ok(g.param(name, || value.clone()))
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients `g` computed for this set's bound parameters.
    pub fn accumulate(&mut self, g: &Graph, grads: &crate::tape::Gradients) {
        for (name, var) in g.params() {
            if let (Some(p), Some(gr)) = (self.entries.get_mut(name), grads.get(*var)) {
                for (a, b) in p.grad.iter_mut().zip(gr) {
                    *a += b;
                }
            }
        }
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for (name, p) in &self.entries {
            let s = p.value.shape();
            write!(out, "{name} {}x{}x{}x{}", s.n, s.c, s.h, s.w).unwrap();
            for v in p.value.data() {
                // Display for f64 is the shortest round-trip form.
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses a checkpoint without checking it against an architecture.
    pub fn parse_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad(format!("missing `{CHECKPOINT_HEADER}` header")));
        }
        let mut entries = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let name = fields.next().unwrap().to_string();
            let dims: Vec<usize> = fields
                .next()
                .ok_or_else(|| bad(format!("record {}: missing shape", i + 1)))?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("record {name}: bad shape: {e}")))?;
            let [n, c, h, w] = dims[..] else {
                return Err(bad(format!("record {name}: shape must have 4 dims")));
            };
            let data: Vec<f64> = fields
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("record {name}: bad value: {e}")))?;
            let value = FeatureMap::new(Shape::new(n, c, h, w), data)
                .map_err(|e| bad(format!("record {name}: {e}")))?;
            let grad = vec![0.0; value.shape().numel()];
            if entries.insert(name.clone(), Param { value, grad }).is_some() {
                return Err(bad(format!("duplicate record {name}")));
            }
        }
        Ok(ParameterSet { entries })
    }

    /// Loads values into an existing set. Unknown names, missing names and
    /// shape mismatches are rejected.
    pub fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        let loaded = Self::parse_checkpoint(text)?;
        for (name, p) in &loaded.entries {
            let Some(mine) = self.entries.get(name) else {
                return Err(Error::Checkpoint(format!("unknown parameter {name}")));
            };
            if mine.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {} but model expects {}",
                    p.value.shape(),
                    mine.value.shape()
                )));
            }
        }
        if let Some(missing) = self.entries.keys().find(|k| !loaded.entries.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("parameter {missing} missing from checkpoint")));
        }
        for (name, p) in loaded.entries {
            self.entries.get_mut(&name).unwrap().value = p.value;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<String> {
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
    }
}

/// Convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    /// Output feeds a sigmoid or softmax gate.
    pub gate: bool,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        ConvLayer {
            name: name.into(),
            spec,
            gate: false,
        }
    }

    pub fn gate(name: impl Into<String>, spec: ConvSpec) -> Self {
        ConvLayer {
            name: name.into(),
            spec,
            gate: true,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = ps.bind(g, &self.weight_name())?;
        let b = ps.bind(g, &self.bias_name())?;
        g.conv2d(x, w, b, self.spec)
    }
}

impl Module for ConvLayer {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(ParamDecl {
            name: self.weight_name(),
            shape: self.spec.weight_shape(),
            kind: ParamKind::ConvWeight {
                fan_in: self.spec.fan_in(),
                gate: self.gate,
            },
        });
        out.push(ParamDecl {
            name: self.bias_name(),
            shape: self.spec.bias_shape(),
            kind: ParamKind::Bias,
        });
    }
}

/// Instance-style normalization with learnable per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub name: String,
    pub channels: usize,
}

impl NormLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        NormLayer {
            name: name.into(),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let gamma = ps.bind(g, &format!("{}.gamma", self.name))?;
        let beta = ps.bind(g, &format!("{}.beta", self.name))?;
        g.norm(x, gamma, beta)
    }
}

impl Module for NormLayer {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        let shape = Shape::new(1, self.channels, 1, 1);
        out.push(ParamDecl {
            name: format!("{}.gamma", self.name),
            shape,
            kind: ParamKind::NormScale,
        });
        out.push(ParamDecl {
            name: format!("{}.beta", self.name),
            shape,
            kind: ParamKind::NormShift,
        });
    }
}

/// Residual depthwise-separable bottleneck:
/// `x + expand(silu(depthwise(silu(reduce(x)))))`.
#[derive(Debug, Clone)]
pub struct DsBottleneck {
    pub reduce: ConvLayer,
    pub depthwise: ConvLayer,
    pub expand: ConvLayer,
}

impl DsBottleneck {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::InvalidShape(format!(
                "bottleneck needs an even channel count, got {channels}"
            )));
        }
        let hidden = channels / 2;
        Ok(DsBottleneck {
            reduce: ConvLayer::new(format!("{name}.reduce"), ConvSpec::pointwise(channels, hidden)),
            depthwise: ConvLayer::new(format!("{name}.dw"), ConvSpec::depthwise(hidden)),
            expand: ConvLayer::new(format!("{name}.expand"), ConvSpec::pointwise(hidden, channels)),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, ps, x)?;
        let h = g.silu(h);
        let h = self.depthwise.forward(g, ps, h)?;
        let h = g.silu(h);
        let h = self.expand.forward(g, ps, h)?;
        g.add(x, h)
    }
}

impl Module for DsBottleneck {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.reduce.declare(out);
        self.depthwise.declare(out);
        self.expand.declare(out);
    }
}

/// Non-residual pointwise bottleneck `C -> C/2 -> C` used to project one
/// modality's features into guidance for the other.
#[derive(Debug, Clone)]
pub struct Projection {
    pub reduce: ConvLayer,
    pub expand: ConvLayer,
}

impl Projection {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::InvalidShape(format!(
                "projection needs an even channel count, got {channels}"
            )));
        }
        Ok(Projection {
            reduce: ConvLayer::new(format!("{name}.reduce"), ConvSpec::pointwise(channels, channels / 2)),
            expand: ConvLayer::new(format!("{name}.expand"), ConvSpec::pointwise(channels / 2, channels)),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, ps, x)?;
        let h = g.silu(h);
        self.expand.forward(g, ps, h)
    }
}

impl Module for Projection {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.reduce.declare(out);
        self.expand.declare(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(shape: Shape, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn bottleneck_rejects_odd_channels() {
        assert!(DsBottleneck::new("b", 3).is_err());
        assert!(Projection::new("p", 5).is_err());
    }

    #[test]
    fn zeroed_bottleneck_is_identity() {
        let block = DsBottleneck::new("b", 8).unwrap();
        let mut ps = ParameterSet::init(&block.param_decls(), 1).unwrap();
        ps.fill_prefix("b.", 0.0);
        let x = random_map(Shape::new(2, 8, 4, 4), 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &ps, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn bottleneck_preserves_shape() {
        let block = DsBottleneck::new("b", 8).unwrap();
        let ps = ParameterSet::init(&block.param_decls(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_map(Shape::new(2, 8, 4, 4), 3));
        let y = block.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 8, 4, 4));
    }

    #[test]
    fn bottleneck_single_pixel_hand_computed() {
        // C = 2, hidden = 1. On a 1x1 map the depthwise 3x3 only sees its
        // center tap, so the block is three scalar affine maps.
        let block = DsBottleneck::new("b", 2).unwrap();
        let mut ps = ParameterSet::init(&block.param_decls(), 0).unwrap();
        ps.set("b.reduce.weight", vec![0.5, -1.0]).unwrap();
        ps.set("b.reduce.bias", vec![0.25]).unwrap();
        let mut dw = vec![0.0; 9];
        dw[4] = 2.0;
        ps.set("b.dw.weight", dw).unwrap();
        ps.set("b.dw.bias", vec![-0.5]).unwrap();
        ps.set("b.expand.weight", vec![1.5, -0.75]).unwrap();
        ps.set("b.expand.bias", vec![0.1, 0.2]).unwrap();

        let (x0, x1) = (0.8, -0.4);
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let r = silu(0.5 * x0 - 1.0 * x1 + 0.25);
        let d = silu(2.0 * r - 0.5);
        let expect = [x0 + 1.5 * d + 0.1, x1 - 0.75 * d + 0.2];

        let mut g = Graph::new();
        let x = g.constant(FeatureMap::new(Shape::new(1, 2, 1, 1), vec![x0, x1]).unwrap());
        let y = block.forward(&mut g, &ps, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn init_is_deterministic_with_bounded_weights() {
        let block = DsBottleneck::new("b", 16).unwrap();
        let gate = ConvLayer::gate("gate", ConvSpec::pointwise(16, 1));
        let mut decls = block.param_decls();
        gate.declare(&mut decls);
        let a = ParameterSet::init(&decls, 42).unwrap();
        let b = ParameterSet::init(&decls, 42).unwrap();
        assert_eq!(a, b);
        let c = ParameterSet::init(&decls, 43).unwrap();
        assert_ne!(a, c);
        for d in &decls {
            let v = a.value(&d.name).unwrap().data();
            match d.kind {
                ParamKind::ConvWeight { fan_in, gate } => {
                    let bound = (1.0 / fan_in as f64).sqrt() * if gate { GATE_INIT_SCALE } else { 1.0 };
                    assert!(v.iter().all(|w| w.abs() <= bound), "{}", d.name);
                    // the empirical range should fill most of the interval
                    let max = v.iter().fold(0.0f64, |m, w| m.max(w.abs()));
                    assert!(max > 0.5 * bound, "{}", d.name);
                }
                ParamKind::Bias | ParamKind::NormShift => assert!(v.iter().all(|&w| w == 0.0)),
                ParamKind::NormScale => assert!(v.iter().all(|&w| w == 1.0)),
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let c = ConvLayer::new("c", ConvSpec::pointwise(2, 2));
        let mut decls = c.param_decls();
        c.declare(&mut decls);
        assert!(ParameterSet::init(&decls, 0).is_err());
    }

    #[test]
    fn zero_grad_clears_all_slots() {
        let block = DsBottleneck::new("b", 4).unwrap();
        let mut ps = ParameterSet::init(&block.param_decls(), 0).unwrap();
        for (_, p) in ps.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = 3.0);
        }
        ps.zero_grad();
        assert!(ps.iter().all(|(_, p)| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let block = DsBottleneck::new("b", 4).unwrap();
        let ps = ParameterSet::init(&block.param_decls(), 9).unwrap();
        let text = ps.to_checkpoint();
        assert!(text.starts_with("pacg-ckpt v1\n"));
        let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(' ').next().unwrap()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);

        let mut other = ParameterSet::init(&block.param_decls(), 10).unwrap();
        other.load_checkpoint(&text).unwrap();
        assert_eq!(other, ps);

        let unknown = format!("{text}extra.weight 1x1x1x1 0.5\n");
        assert!(matches!(other.load_checkpoint(&unknown), Err(Error::Checkpoint(_))));

        let wider = DsBottleneck::new("b", 8).unwrap();
        let mut mismatched = ParameterSet::init(&wider.param_decls(), 0).unwrap();
        assert!(matches!(mismatched.load_checkpoint(&text), Err(Error::Checkpoint(_))));

        assert!(ParameterSet::parse_checkpoint("nope\n").is_err());
    }
}
