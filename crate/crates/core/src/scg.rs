//! Symmetrical cross-gating between the RGB and IR streams at one pyramid
//! level.
//!
//! Each stream is refined on its own, then enhanced by two signals derived
//! from the *other* stream's refined features: a 1-channel spatial gate
//! applied as `(1 + M)`, and a projected guidance map `G` weighted by its own
//! per-position, per-channel gate `g`. The result is added to the stream's
//! input and normalized:
//!
//! ```text
//! F'    = R(F_in)
//! M     = sigmoid(conv1x1(F'_other))           // 1 channel
//! F~    = F' * (1 + M)
//! G     = P(F'_other);  g = sigmoid(conv1x1(G)) // C channels
//! F_out = Norm(F_in + F~ + g * G)
//! ```

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, DsBottleneck, Module, NormLayer, ParamDecl, ParameterSet, Projection};
use crate::tape::{Graph, Var};
use crate::tensor::ConvSpec;

/// Vars for an RGB/IR pair living in one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairVars {
    pub rgb: Var,
    pub ir: Var,
}

impl PairVars {
    pub fn new(rgb: Var, ir: Var) -> Self {
        PairVars { rgb, ir }
    }

    pub fn swapped(self) -> Self {
        PairVars {
            rgb: self.ir,
            ir: self.rgb,
        }
    }
}

/// Guidance flowing from a source stream into a target stream.
#[derive(Debug, Clone)]
pub struct Direction {
    pub spatial_gate: ConvLayer,
    pub projection: Projection,
    pub channel_gate: ConvLayer,
}

impl Direction {
    fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(Direction {
            spatial_gate: ConvLayer::gate(format!("{name}.spatial_gate"), ConvSpec::pointwise(channels, 1)),
            projection: Projection::new(&format!("{name}.proj"), channels)?,
            channel_gate: ConvLayer::gate(format!("{name}.channel_gate"), ConvSpec::pointwise(channels, channels)),
        })
    }
}

impl Module for Direction {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.spatial_gate.declare(out);
        self.projection.declare(out);
        self.channel_gate.declare(out);
    }
}

/// Intermediate values of one direction, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct DirectionTrace {
    pub refined: Var,
    pub spatial_gate: Var,
    pub enhanced: Var,
    pub guidance: Var,
    pub channel_gate: Var,
    pub output: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ScgTrace {
    pub rgb: DirectionTrace,
    pub ir: DirectionTrace,
}

impl ScgTrace {
    pub fn output(&self) -> PairVars {
        PairVars::new(self.rgb.output, self.ir.output)
    }
}

#[derive(Debug, Clone)]
pub struct Scg {
    pub name: String,
    pub channels: usize,
    pub rgb_refiner: DsBottleneck,
    pub ir_refiner: DsBottleneck,
    pub ir_to_rgb: Direction,
    pub rgb_to_ir: Direction,
    pub rgb_norm: NormLayer,
    pub ir_norm: NormLayer,
}

impl Scg {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(Scg {
            name: name.to_string(),
            channels,
            rgb_refiner: DsBottleneck::new(&format!("{name}.rgb_refiner"), channels)?,
            ir_refiner: DsBottleneck::new(&format!("{name}.ir_refiner"), channels)?,
            ir_to_rgb: Direction::new(&format!("{name}.ir_to_rgb"), channels)?,
            rgb_to_ir: Direction::new(&format!("{name}.rgb_to_ir"), channels)?,
            rgb_norm: NormLayer::new(format!("{name}.rgb_norm"), channels),
            ir_norm: NormLayer::new(format!("{name}.ir_norm"), channels),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, pair: PairVars) -> Result<PairVars> {
        Ok(self.forward_traced(g, ps, pair)?.output())
    }

    pub fn forward_traced(&self, g: &mut Graph, ps: &ParameterSet, pair: PairVars) -> Result<ScgTrace> {
        let (rs, is) = (g.shape(pair.rgb), g.shape(pair.ir));
        if rs != is {
            return Err(Error::shape("scg modalities", rs, is));
        }
        if rs.c != self.channels {
            return Err(Error::InvalidShape(format!(
                "{} expects {} channels, got {rs}",
                self.name, self.channels
            )));
        }
        let rgb_ref = self.rgb_refiner.forward(g, ps, pair.rgb)?;
        let ir_ref = self.ir_refiner.forward(g, ps, pair.ir)?;
        let rgb = guide(g, ps, &self.ir_to_rgb, &self.rgb_norm, pair.rgb, rgb_ref, ir_ref)?;
        let ir = guide(g, ps, &self.rgb_to_ir, &self.ir_norm, pair.ir, ir_ref, rgb_ref)?;
        Ok(ScgTrace { rgb, ir })
    }
}

fn guide(
    g: &mut Graph,
    ps: &ParameterSet,
    dir: &Direction,
    norm: &NormLayer,
    input: Var,
    refined: Var,
    source: Var,
) -> Result<DirectionTrace> {
    let m = dir.spatial_gate.forward(g, ps, source)?;
    let m = g.sigmoid(m);
    let one_plus_m = g.affine(m, 1.0, 1.0);
    let enhanced = g.mul(refined, one_plus_m)?;

    let guidance = dir.projection.forward(g, ps, source)?;
    let gate = dir.channel_gate.forward(g, ps, guidance)?;
    let gate = g.sigmoid(gate);
    let gated = g.mul(gate, guidance)?;

    let branches = g.add(enhanced, gated)?;
    let sum = g.add(input, branches)?;
    let output = norm.forward(g, ps, sum)?;
    Ok(DirectionTrace {
        refined,
        spatial_gate: m,
        enhanced,
        guidance,
        channel_gate: gate,
        output,
    })
}

impl Module for Scg {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.rgb_refiner.declare(out);
        self.ir_refiner.declare(out);
        self.ir_to_rgb.declare(out);
        self.rgb_to_ir.declare(out);
        self.rgb_norm.declare(out);
        self.ir_norm.declare(out);
    }
}
