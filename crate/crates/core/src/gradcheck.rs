//! Central finite-difference verification of tape gradients.
//!
//! Every element of every input and every bound parameter is perturbed by
//! `±FD_STEP` and the loss recomputed on a fresh graph; the result is
//! compared with the tape's gradient.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::loss::{assign_targets, detection_loss};
use crate::detect::model::{Detector, ModelConfig};
use crate::detect::synth::{generate, SynthConfig};
use crate::error::Result;
use crate::nn::{DsBottleneck, Module, ParameterSet};
use crate::pfmg::Pfmg;
use crate::pyramid::PyramidConfig;
use crate::scg::{PairVars, Scg};
use crate::tape::{Graph, OpKind, Var};
use crate::tensor::{ConvSpec, FeatureMap, Shape};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients that are zero up to rounding do not
/// produce huge relative errors.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub component: String,
    pub worst_rel: f64,
    /// Where the worst error occurred.
    pub worst_at: String,
    pub checked: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst_rel < REL_TOLERANCE
    }
}

/// Compares `f`'s tape gradient against central differences for every
/// element of `inputs` and every parameter `f` binds from `ps`.
pub fn check<F>(component: &str, ps: &ParameterSet, inputs: &[FeatureMap], fault: Option<OpKind>, f: F) -> Result<Check>
where
    F: Fn(&mut Graph, &ParameterSet, &[Var]) -> Result<Var>,
{
    let eval = |ps: &ParameterSet, inputs: &[FeatureMap]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let loss = f(&mut g, ps, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = match fault {
        Some(k) => Graph::with_fault(k),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let loss = f(&mut g, ps, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = (0.0f64, String::from("-"));
    let mut checked = 0;
    let mut record = |a: f64, n: f64, at: &dyn Fn() -> String| {
        let e = relative_error(a, n);
        checked += 1;
        if e > worst.0 || e.is_nan() {
            worst = (if e.is_nan() { f64::INFINITY } else { e }, format!("{} analytic {a:.6e} numeric {n:.6e}", at()));
        }
    };

    for (k, (m, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(&g, v);
        for i in 0..m.data().len() {
            let perturbed = |delta: f64| {
                let mut data = m.data().to_vec();
                data[i] += delta;
                let mut xs = inputs.to_vec();
                xs[k] = FeatureMap::new(m.shape(), data).unwrap();
                eval(ps, &xs)
            };
            let num = (perturbed(FD_STEP)? - perturbed(-FD_STEP)?) / (2.0 * FD_STEP);
            record(analytic.data()[i], num, &|| format!("input {k}[{i}]"));
        }
    }

    let bound: HashMap<&str, Var> = g.params().iter().map(|(n, v)| (n.as_str(), *v)).collect();
    for (name, p) in ps.iter() {
        let Some(&v) = bound.get(name) else { continue };
        let analytic = grads.get_or_zeros(&g, v);
        for i in 0..p.value.data().len() {
            let perturbed = |delta: f64| {
                let mut q = ps.clone();
                let mut data = p.value.data().to_vec();
                data[i] += delta;
                q.set(name, data).unwrap();
                eval(&q, inputs)
            };
            let num = (perturbed(FD_STEP)? - perturbed(-FD_STEP)?) / (2.0 * FD_STEP);
            record(analytic.data()[i], num, &|| format!("{name}[{i}]"));
        }
    }

    Ok(Check {
        component: component.to_string(),
        worst_rel: worst.0,
        worst_at: worst.1,
        checked,
    })
}

pub fn random_map(shape: Shape, rng: &mut ChaCha8Rng, scale: f64) -> FeatureMap {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

/// Reduces `v` to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
pub fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random_map(g.shape(v), &mut rng, 1.0);
    g.dot(v, &w)
}

/// Randomizes every parameter (biases and norm affines included) so checks
/// do not run at special points like all-zero biases.
pub fn jitter(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let v = ps.value(&name).unwrap();
        let data = v.data().iter().map(|x| x + rng.random_range(-scale..scale)).collect();
        ps.set(&name, data).unwrap();
    }
}

fn conv_params(spec: ConvSpec, rng: &mut ChaCha8Rng) -> ParameterSet {
    let layer = crate::nn::ConvLayer::new("conv", spec);
    let mut ps = ParameterSet::init(&layer.param_decls(), rng.random()).unwrap();
    jitter(&mut ps, rng, 0.3);
    ps
}

/// Every op, the two fusion modules, and the end-to-end detector at a tiny
/// size. The end-to-end check uses `channels` at every level and an
/// `input_size` square input.
pub fn run_all(seed: u64, channels: usize, input_size: usize, fault: Option<OpKind>) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = channels;
    let small = Shape::new(2, c, 5, 5);
    let empty = ParameterSet::default();
    let mut checks = Vec::new();

    for (name, spec, shape) in [
        ("conv2d 3x3 s2", ConvSpec::k3(c, c + 2, 2), Shape::new(2, c, 6, 5)),
        ("conv2d 3x3 s1", ConvSpec::k3(c, 3, 1), small),
        ("conv2d 1x1", ConvSpec::pointwise(c, 3), small),
        ("conv2d depthwise", ConvSpec::depthwise(c), small),
        ("conv2d 3x3 s2 nopad", ConvSpec::new(c, 2, 3, 2, 0, 1)?, Shape::new(1, c, 7, 7)),
    ] {
        let ps = conv_params(spec, &mut rng);
        let x = random_map(shape, &mut rng, 1.0);
        checks.push(check(name, &ps, &[x], fault, |g, ps, v| {
            let layer = crate::nn::ConvLayer::new("conv", spec);
            let y = layer.forward(g, ps, v[0])?;
            probe(g, y, 1)
        })?);
    }

    type Unary = fn(&mut Graph, Var) -> Result<Var>;
    let unary: [(&str, Unary); 4] = [
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("silu", |g, x| Ok(g.silu(x))),
        ("affine", |g, x| Ok(g.affine(x, -1.5, 0.25))),
        ("softmax_channels", |g, x| g.softmax_channels(x)),
    ];
    for (name, op) in unary {
        let x = random_map(small, &mut rng, 3.0);
        checks.push(check(name, &empty, &[x], fault, |g, _, v| {
            let y = op(g, v[0])?;
            probe(g, y, 2)
        })?);
    }

    for (name, rhs) in [
        ("add", small),
        ("add broadcast channel", small.with_c(1)),
        ("mul", small),
        ("mul broadcast channel", small.with_c(1)),
        ("mul broadcast spatial", small.with_hw(1, 1)),
        ("mul broadcast shared spatial", Shape::new(1, c, 1, 1)),
    ] {
        let a = random_map(small, &mut rng, 2.0);
        let b = random_map(rhs, &mut rng, 2.0);
        let is_add = name.starts_with("add");
        checks.push(check(name, &empty, &[a, b], fault, |g, _, v| {
            let y = if is_add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
            probe(g, y, 3)
        })?);
    }

    let parts = [random_map(small.with_c(2), &mut rng, 1.0), random_map(small.with_c(3), &mut rng, 1.0)];
    checks.push(check("concat/split channels", &empty, &parts, fault, |g, _, v| {
        let cat = g.concat_channels(v)?;
        let s = g.split_channels(cat, &[1, 3, 1])?;
        let y = g.mul(s[1], s[0])?;
        let z = g.add(y, s[2])?;
        probe(g, z, 4)
    })?);

    {
        let norm = crate::nn::NormLayer::new("norm", c);
        let mut ps = ParameterSet::init(&norm.param_decls(), 0)?;
        jitter(&mut ps, &mut rng, 0.5);
        let x = random_map(small, &mut rng, 2.0);
        checks.push(check("norm", &ps, &[x], fault, |g, ps, v| {
            let y = norm.forward(g, ps, v[0])?;
            probe(g, y, 5)
        })?);
    }

    let x = random_map(small, &mut rng, 2.0);
    checks.push(check("sum", &empty, &[x], fault, |g, _, v| {
        let s = g.sigmoid(v[0]);
        Ok(g.sum(s))
    })?);

    {
        let block = DsBottleneck::new("block", c)?;
        let mut ps = ParameterSet::init(&block.param_decls(), rng.random())?;
        jitter(&mut ps, &mut rng, 0.2);
        let x = random_map(small, &mut rng, 1.0);
        checks.push(check("ds_bottleneck", &ps, &[x], fault, |g, ps, v| {
            let y = block.forward(g, ps, v[0])?;
            probe(g, y, 6)
        })?);
    }

    {
        let scg = Scg::new("scg", c)?;
        let mut ps = ParameterSet::init(&scg.param_decls(), rng.random())?;
        jitter(&mut ps, &mut rng, 0.2);
        let shape = Shape::new(1, c, 6, 6);
        let xs = [random_map(shape, &mut rng, 1.0), random_map(shape, &mut rng, 1.0)];
        checks.push(check("scg", &ps, &xs, fault, |g, ps, v| {
            let out = scg.forward(g, ps, PairVars::new(v[0], v[1]))?;
            let a = probe(g, out.rgb, 7)?;
            let b = probe(g, out.ir, 8)?;
            g.add(a, b)
        })?);
    }

    {
        let pfmg = Pfmg::new("pfmg", c, c);
        let mut ps = ParameterSet::init(&pfmg.param_decls(), rng.random())?;
        jitter(&mut ps, &mut rng, 0.2);
        let curr = Shape::new(1, c, 4, 4);
        let prev = Shape::new(1, c, 8, 8);
        let xs = [
            random_map(curr, &mut rng, 1.0),
            random_map(curr, &mut rng, 1.0),
            random_map(prev, &mut rng, 1.0),
            random_map(prev, &mut rng, 1.0),
        ];
        checks.push(check("pfmg", &ps, &xs, fault, |g, ps, v| {
            let out = pfmg.forward(g, ps, PairVars::new(v[0], v[1]), PairVars::new(v[2], v[3]))?;
            probe(g, out, 9)
        })?);
    }

    checks.push(end_to_end(seed, channels, input_size, fault, &mut rng)?);
    Ok(checks)
}

fn end_to_end(seed: u64, channels: usize, input_size: usize, fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let det = Detector::new(ModelConfig {
        pyramid: PyramidConfig {
            input_size,
            widths: [channels; 5],
            enable_scg: true,
            enable_pfmg: true,
        },
        num_classes: 2,
    })?;
    let mut ps = det.init_params(seed)?;
    jitter(&mut ps, rng, 0.05);
    let synth = SynthConfig {
        image_size: input_size,
        min_objects: 2,
        max_objects: 3,
        min_size: 5,
        max_size: (input_size / 2 - 1).max(5),
        seed,
        ..SynthConfig::default()
    };
    let scene = generate(&synth, 1)?.remove(0);
    let targets = vec![assign_targets(&scene.objects, input_size)];
    check("end-to-end", &ps, &[scene.rgb, scene.ir], fault, |g, ps, v| {
        let outs = det.forward(g, ps, v[0], v[1])?;
        Ok(detection_loss(g, &outs, &targets, 2)?.0)
    })
}

/// One line per check plus a verdict.
pub fn report(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "{:<30} worst_rel {:.3e}  ({} values, worst at {})  {}\n",
            c.component,
            c.worst_rel,
            c.checked,
            c.worst_at,
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}
