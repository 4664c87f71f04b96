use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::nn::{ConvLayer, Module, ParamDecl, ParameterSet};
use crate::pyramid::{Pyramid, PyramidConfig, FUSED_STRIDES};
use crate::tape::{sigmoid_scalar, Graph, Var};
use crate::tensor::ConvSpec;

/// Box-size logits are clamped to this magnitude before `exp`.
pub const MAX_SIZE_LOGIT: f64 = 6.0;

/// Initial objectness bias, `logit(0.01)`: most cells are background.
pub const OBJECTNESS_PRIOR: f64 = -4.59511985013459;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Channels per head cell: objectness, class logits, 4 box offsets.
    pub fn head_channels(&self) -> usize {
        5 + self.num_classes
    }
}

/// Fused pyramid plus one 1x1 prediction conv per level.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub pyramid: Pyramid,
    pub heads: [ConvLayer; 3],
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let pyramid = Pyramid::new(config.pyramid.clone())?;
        let w = config.pyramid.widths;
        let hc = config.head_channels();
        let heads = [3, 4, 5].map(|l| ConvLayer::new(format!("head.p{l}"), ConvSpec::pointwise(w[l - 1], hc)));
        Ok(Detector { config, pyramid, heads })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        let mut ps = ParameterSet::init(&self.param_decls(), seed)?;
        for h in &self.heads {
            let name = h.bias_name();
            let mut b = ps.value(&name)?.data().to_vec();
            b[0] = OBJECTNESS_PRIOR;
            ps.set(&name, b)?;
        }
        Ok(ps)
    }

    /// Raw head outputs `(N, 5 + K, S/s, S/s)` for strides 8, 16, 32.
    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, rgb: Var, ir: Var) -> Result<[Var; 3]> {
        let fused = self.pyramid.forward(g, ps, rgb, ir)?;
        let mut out = Vec::with_capacity(3);
        for (head, &f) in self.heads.iter().zip(&fused.levels) {
            out.push(head.forward(g, ps, f)?);
        }
        Ok(out.try_into().unwrap())
    }

    /// Rebuilds the architecture a checkpoint was trained with and loads it.
    pub fn from_checkpoint(text: &str, input_size: usize) -> Result<(Detector, ParameterSet)> {
        let raw = ParameterSet::parse_checkpoint(text)?;
        let mut widths = [0; 5];
        for (i, w) in widths.iter_mut().enumerate() {
            let name = format!("backbone.rgb.p{}.conv.weight", i + 1);
            *w = raw
                .value(&name)
                .map_err(|_| Error::Checkpoint(format!("missing {name}")))?
                .shape()
                .n;
        }
        let head = raw
            .value("head.p3.weight")
            .map_err(|_| Error::Checkpoint("missing head.p3.weight".into()))?;
        let num_classes = head
            .shape()
            .n
            .checked_sub(5)
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::Checkpoint("head has too few output channels".into()))?;
        let config = ModelConfig {
            pyramid: PyramidConfig {
                input_size,
                widths,
                enable_scg: raw.names().any(|n| n.starts_with("scg.")),
                enable_pfmg: raw.names().any(|n| n.starts_with("pfmg.")),
            },
            num_classes,
        };
        let det = Detector::new(config)?;
        let mut ps = det.init_params(0)?;
        ps.load_checkpoint(text)?;
        Ok((det, ps))
    }
}

impl Module for Detector {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.pyramid.declare(out);
        for h in &self.heads {
            h.declare(out);
        }
    }
}

/// Maps cell-relative raw offsets `(tx, ty, tw, th)` at cell `(row, col)` to
/// an image-space box: centers through a sigmoid inside the cell, sizes as
/// `stride * exp(t)`.
pub fn decode_box(raw: [f64; 4], row: usize, col: usize, stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + sigmoid_scalar(raw[0])) * s;
    let cy = (row as f64 + sigmoid_scalar(raw[1])) * s;
    let w = s * raw[2].clamp(-MAX_SIZE_LOGIT, MAX_SIZE_LOGIT).exp();
    let h = s * raw[3].clamp(-MAX_SIZE_LOGIT, MAX_SIZE_LOGIT).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Index of fused level (0 = P3) responsible for an object: the finest level
/// whose stride is more than half the object's longer side.
pub fn level_for_size(longest_side: f64) -> usize {
    FUSED_STRIDES
        .iter()
        .position(|&s| longest_side < 2.0 * s as f64)
        .unwrap_or(FUSED_STRIDES.len() - 1)
}
