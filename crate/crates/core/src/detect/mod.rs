//! Synthetic scenes, a one-conv-per-level detection head, training and
//! inference.

pub mod dataset;
pub mod loss;
pub mod model;
pub mod predict;
pub mod synth;
pub mod train;

pub use model::{Detector, ModelConfig};
pub use synth::{Scene, SceneObject, SynthConfig, Visibility};
pub use train::TrainConfig;
