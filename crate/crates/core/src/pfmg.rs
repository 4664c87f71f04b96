//! Pyramid-level fusion of the two streams, gated by guidance from the
//! previous (finer) level.
//!
//! ```text
//! M_S        = sigmoid(H(concat(prev.rgb, prev.ir)))  // 3x3 stride-2, 1 channel
//! [Fr, Fi]   = split(I(concat(curr.rgb, curr.ir)))     // I(x) = x + expand(silu(reduce(x)))
//! [wr, wi]   = softmax(conv1x1(concat(Fr, Fi)))       // per pixel, sums to 1
//! F_base     = wr * Fr + wi * Fi
//! F_fused    = F_base + M_S * F_base
//! ```

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Module, ParamDecl, ParameterSet};
use crate::scg::PairVars;
use crate::tape::{Graph, Var};
use crate::tensor::ConvSpec;

#[derive(Debug, Clone)]
pub struct Pfmg {
    pub name: String,
    pub channels: usize,
    pub prev_channels: usize,
    pub hier_gate: ConvLayer,
    pub interaction_in: ConvLayer,
    pub interaction_out: ConvLayer,
    pub weight_head: ConvLayer,
}

/// Intermediate values of one fusion.
#[derive(Debug, Clone, Copy)]
pub struct PfmgTrace {
    pub hier_gate: Var,
    pub rgb: Var,
    pub ir: Var,
    /// Two channels: `(w_rgb, w_ir)`.
    pub weights: Var,
    pub base: Var,
    pub fused: Var,
}

impl Pfmg {
    pub fn new(name: &str, channels: usize, prev_channels: usize) -> Self {
        Pfmg {
            name: name.to_string(),
            channels,
            prev_channels,
            hier_gate: ConvLayer::gate(format!("{name}.hier_gate"), ConvSpec::k3(2 * prev_channels, 1, 2)),
            interaction_in: ConvLayer::new(
                format!("{name}.interaction.reduce"),
                ConvSpec::pointwise(2 * channels, channels),
            ),
            interaction_out: ConvLayer::new(
                format!("{name}.interaction.expand"),
                ConvSpec::pointwise(channels, 2 * channels),
            ),
            weight_head: ConvLayer::gate(format!("{name}.weight_head"), ConvSpec::pointwise(2 * channels, 2)),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, curr: PairVars, prev: PairVars) -> Result<Var> {
        Ok(self.forward_traced(g, ps, curr, prev)?.fused)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        ps: &ParameterSet,
        curr: PairVars,
        prev: PairVars,
    ) -> Result<PfmgTrace> {
        let cs = g.shape(curr.rgb);
        let ps_ = g.shape(prev.rgb);
        if g.shape(curr.ir) != cs {
            return Err(Error::shape("pfmg current level", cs, g.shape(curr.ir)));
        }
        if g.shape(prev.ir) != ps_ {
            return Err(Error::shape("pfmg previous level", ps_, g.shape(prev.ir)));
        }
        if ps_.h != 2 * cs.h || ps_.w != 2 * cs.w || ps_.n != cs.n {
            return Err(Error::InvalidShape(format!(
                "{}: previous level {ps_} must be exactly twice the spatial size of {cs}",
                self.name
            )));
        }
        if cs.c != self.channels || ps_.c != self.prev_channels {
            return Err(Error::InvalidShape(format!(
                "{} expects {} / {} channels, got {cs} / {ps_}",
                self.name, self.channels, self.prev_channels
            )));
        }

        let guide = g.concat_channels(&[prev.rgb, prev.ir])?;
        let m = self.hier_gate.forward(g, ps, guide)?;
        let m = g.sigmoid(m);

        let cat = g.concat_channels(&[curr.rgb, curr.ir])?;
        let h = self.interaction_in.forward(g, ps, cat)?;
        let h = g.silu(h);
        let h = self.interaction_out.forward(g, ps, h)?;
        // equal in and out widths, so the bottleneck carries a shortcut
        let interacted = g.add(cat, h)?;
        let parts = g.split_channels(interacted, &[self.channels, self.channels])?;
        let (rgb, ir) = (parts[0], parts[1]);

        // concat(split(x)) is x itself
        let logits = self.weight_head.forward(g, ps, interacted)?;
        let weights = g.softmax_channels(logits)?;
        let w = g.split_channels(weights, &[1, 1])?;
        let a = g.mul(rgb, w[0])?;
        let b = g.mul(ir, w[1])?;
        let base = g.add(a, b)?;

        let modulation = g.mul(base, m)?;
        let fused = g.add(base, modulation)?;
        Ok(PfmgTrace {
            hier_gate: m,
            rgb,
            ir,
            weights,
            base,
            fused,
        })
    }
}

impl Module for Pfmg {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.hier_gate.declare(out);
        self.interaction_in.declare(out);
        self.interaction_out.declare(out);
        self.weight_head.declare(out);
    }
}

/// Parameter-free fallback fusion: `0.5 * rgb + 0.5 * ir`.
pub fn average_fusion(g: &mut Graph, pair: PairVars) -> Result<Var> {
    let a = g.affine(pair.rgb, 0.5, 0.0);
    let b = g.affine(pair.ir, 0.5, 0.0);
    g.add(a, b)
}
