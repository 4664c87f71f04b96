//! Dual-stream backbone with cross-gating after P2, P3 and P4, and the
//! pyramid fusion that collapses both streams into one P3..P5 pyramid.

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, DsBottleneck, Module, ParamDecl, ParameterSet};
use crate::pfmg::{average_fusion, Pfmg, PfmgTrace};
use crate::scg::{PairVars, Scg};
use crate::tape::{Graph, Var};
use crate::tensor::ConvSpec;

/// Strides of the fused levels P3, P4, P5.
pub const FUSED_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    /// Square input side; must be divisible by 32.
    pub input_size: usize,
    /// Channels of P1..P5.
    pub widths: [usize; 5],
    /// Cross-gating after P2, P3, P4.
    pub enable_scg: bool,
    /// Gated pyramid fusion; when off each level is the plain average of
    /// the two streams.
    pub enable_pfmg: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            input_size: 64,
            widths: [8, 16, 32, 64, 128],
            enable_scg: true,
            enable_pfmg: true,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w < 2 || w % 2 != 0) {
            return Err(Error::Config(format!("channel width {w} must be even and >= 2")));
        }
        Ok(())
    }

    /// Spatial side of level P`i` (1-based).
    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> level
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv: ConvLayer,
    pub block: DsBottleneck,
}

impl Stage {
    fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, ps, x)?;
        let h = g.silu(h);
        self.block.forward(g, ps, h)
    }
}

impl Module for Stage {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.conv.declare(out);
        self.block.declare(out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Ir,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Ir => "ir",
        }
    }
}

/// Pair vars for P2..P5.
#[derive(Debug, Clone, Copy)]
pub struct DualPyramid {
    pub levels: [PairVars; 4],
}

impl DualPyramid {
    /// Level P`i`, `i` in 2..=5.
    pub fn level(&self, i: usize) -> PairVars {
        self.levels[i - 2]
    }
}

/// Fused P3, P4, P5.
#[derive(Debug, Clone, Copy)]
pub struct FusedPyramid {
    pub levels: [Var; 3],
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub config: PyramidConfig,
    pub rgb: Vec<Stage>,
    pub ir: Vec<Stage>,
    /// After P2, P3, P4, when enabled.
    pub scg: Vec<Scg>,
    /// Fusing P3, P4, P5, when enabled.
    pub pfmg: Vec<Pfmg>,
}

impl Pyramid {
    pub fn new(config: PyramidConfig) -> Result<Self> {
        config.validate()?;
        let stream = |s: Stream| -> Result<Vec<Stage>> {
            (0..5)
                .map(|i| {
                    let cin = if i == 0 { 3 } else { config.widths[i - 1] };
                    let cout = config.widths[i];
                    let base = format!("backbone.{}.p{}", s.name(), i + 1);
                    Ok(Stage {
                        conv: ConvLayer::new(format!("{base}.conv"), ConvSpec::k3(cin, cout, 2)),
                        block: DsBottleneck::new(&format!("{base}.block"), cout)?,
                    })
                })
                .collect()
        };
        let scg = if config.enable_scg {
            (2..=4)
                .map(|l| Scg::new(&format!("scg.p{l}"), config.widths[l - 1]))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let pfmg = if config.enable_pfmg {
            (3..=5)
                .map(|l| Pfmg::new(&format!("pfmg.p{l}"), config.widths[l - 1], config.widths[l - 2]))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Pyramid {
            rgb: stream(Stream::Rgb)?,
            ir: stream(Stream::Ir)?,
            scg,
            pfmg,
            config,
        })
    }

    fn check_image(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let side = self.config.input_size;
        if s.c != 3 || s.h != side || s.w != side {
            return Err(Error::InvalidShape(format!(
                "expected Nx3x{side}x{side} image, got {s}"
            )));
        }
        Ok(())
    }

    /// Levels P1..P5 of one stream run alone, with no cross-gating.
    pub fn stream_forward(&self, g: &mut Graph, ps: &ParameterSet, stream: Stream, x: Var) -> Result<Vec<Var>> {
        self.check_image(g, x)?;
        let stages = match stream {
            Stream::Rgb => &self.rgb,
            Stream::Ir => &self.ir,
        };
        let mut out = Vec::with_capacity(5);
        let mut h = x;
        for stage in stages {
            h = stage.forward(g, ps, h)?;
            out.push(h);
        }
        Ok(out)
    }

    pub fn backbone_forward(&self, g: &mut Graph, ps: &ParameterSet, rgb: Var, ir: Var) -> Result<DualPyramid> {
        self.check_image(g, rgb)?;
        self.check_image(g, ir)?;
        if g.shape(rgb) != g.shape(ir) {
            return Err(Error::shape("backbone inputs", g.shape(rgb), g.shape(ir)));
        }
        let mut pair = PairVars::new(rgb, ir);
        let mut levels = Vec::with_capacity(4);
        for i in 0..5 {
            pair = PairVars::new(
                self.rgb[i].forward(g, ps, pair.rgb)?,
                self.ir[i].forward(g, ps, pair.ir)?,
            );
            // stages 1..3 (0-based) produce P2..P4
            if (1..=3).contains(&i) {
                if let Some(scg) = self.scg.get(i - 1) {
                    pair = scg.forward(g, ps, pair)?;
                }
            }
            if i >= 1 {
                levels.push(pair);
            }
        }
        Ok(DualPyramid {
            levels: levels.try_into().unwrap(),
        })
    }

    pub fn fuse(&self, g: &mut Graph, ps: &ParameterSet, dp: &DualPyramid) -> Result<FusedPyramid> {
        Ok(FusedPyramid {
            levels: self.fuse_traced(g, ps, dp)?.map(|t| t.fused),
        })
    }

    /// Per-level traces; `None` entries when gated fusion is disabled.
    pub fn fuse_traced(&self, g: &mut Graph, ps: &ParameterSet, dp: &DualPyramid) -> Result<[FusedLevel; 3]> {
        let mut out = Vec::with_capacity(3);
        for l in 3..=5 {
            let level = if self.pfmg.is_empty() {
                FusedLevel {
                    fused: average_fusion(g, dp.level(l))?,
                    trace: None,
                }
            } else {
                let t = self.pfmg[l - 3].forward_traced(g, ps, dp.level(l), dp.level(l - 1))?;
                FusedLevel {
                    fused: t.fused,
                    trace: Some(t),
                }
            };
            out.push(level);
        }
        Ok(out.try_into().unwrap())
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, rgb: Var, ir: Var) -> Result<FusedPyramid> {
        let dp = self.backbone_forward(g, ps, rgb, ir)?;
        self.fuse(g, ps, &dp)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusedLevel {
    pub fused: Var,
    pub trace: Option<PfmgTrace>,
}

impl Module for Pyramid {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        for s in self.rgb.iter().chain(&self.ir) {
            s.declare(out);
        }
        for s in &self.scg {
            s.declare(out);
        }
        for p in &self.pfmg {
            p.declare(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{FeatureMap, Shape};

    #[test]
    fn rejects_bad_input_size() {
        for s in [0, 48, 65, 100] {
            let cfg = PyramidConfig {
                input_size: s,
                ..PyramidConfig::default()
            };
            assert!(Pyramid::new(cfg).is_err(), "{s}");
        }
    }

    #[test]
    fn paper_scale_p3_is_80() {
        let cfg = PyramidConfig {
            input_size: 640,
            ..PyramidConfig::default()
        };
        assert_eq!(cfg.level_size(3), 80);
        assert_eq!(640 / FUSED_STRIDES[0], 80);
    }

    #[test]
    fn rejects_mismatched_image() {
        let p = Pyramid::new(PyramidConfig::default()).unwrap();
        let ps = ParameterSet::init(&p.param_decls(), 0).unwrap();
        let mut g = Graph::new();
        let a = g.constant(FeatureMap::zeros(Shape::new(1, 3, 64, 64)));
        let b = g.constant(FeatureMap::zeros(Shape::new(1, 3, 32, 32)));
        assert!(p.backbone_forward(&mut g, &ps, a, b).is_err());
    }
}
