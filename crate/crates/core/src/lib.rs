//! Dual-stream RGB/infrared feature pyramid with symmetrical cross-gating
//! and pyramidal gated fusion, built on a small reverse-mode tape.

pub mod ablation;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod nn;
pub mod pfmg;
pub mod pyramid;
pub mod scg;
pub mod tape;
pub mod tensor;

pub use config::{KeyValues, RunConfig};
pub use error::{Error, Result};
pub use eval::{BBox, Detection, GroundTruth};
pub use nn::{Module, ParameterSet};
pub use pfmg::Pfmg;
pub use pyramid::{Pyramid, PyramidConfig};
pub use scg::{PairVars, Scg};
pub use tape::{Graph, OpKind, Var};
pub use tensor::{ConvSpec, FeatureMap, Shape};
