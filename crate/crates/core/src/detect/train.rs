//! Mini-batch SGD with momentum and weight decay.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detect::loss::{assign_targets, detection_loss, LossParts, Target};
use crate::detect::model::Detector;
use crate::detect::synth::Scene;
use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::tape::Graph;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate ramp from zero.
    pub warmup_epochs: usize,
    /// Largest global L2 norm of the raw gradient; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            warmup_epochs: 0,
            grad_clip: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("grad_clip must be >= 0, got {}", self.grad_clip)));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need lr >= 0, 0 <= momentum < 1, weight_decay >= 0; got {}, {}, {}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Classic momentum SGD: `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Rescales every gradient so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip(ps: &mut ParameterSet, max_norm: f64) -> f64 {
        let norm = ps.iter().flat_map(|(_, p)| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let k = max_norm / norm;
            for (_, p) in ps.iter_mut() {
                p.grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        norm
    }

    pub fn step(&mut self, ps: &mut ParameterSet, lr: f64) {
        for (name, p) in ps.iter_mut() {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.grad.len()]);
            let mut data = p.value.data().to_vec();
            for i in 0..data.len() {
                v[i] = self.momentum * v[i] + p.grad[i] + self.weight_decay * data[i];
                data[i] -= lr * v[i];
            }
            p.value = FeatureMap::new(p.value.shape(), data).unwrap();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub parts: LossParts,
}

impl EpochLoss {
    pub fn total(&self) -> f64 {
        self.parts.total()
    }
}

/// CSV with header `epoch,total,objectness,class,box`.
pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,total,objectness,class,box\n");
    for e in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            e.total(),
            e.parts.objectness,
            e.parts.class,
            e.parts.boxes
        ));
    }
    out
}

/// Loss and parameter gradients for one batch. Gradients are accumulated
/// into `ps` after zeroing.
pub fn batch_gradients(det: &Detector, ps: &mut ParameterSet, batch: &[&Scene]) -> Result<LossParts> {
    let input = det.config.pyramid.input_size;
    let rgb = FeatureMap::stack(&batch.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
    let ir = FeatureMap::stack(&batch.iter().map(|s| &s.ir).collect::<Vec<_>>())?;
    let targets: Vec<Vec<Target>> = batch.iter().map(|s| assign_targets(&s.objects, input)).collect();
    let mut g = Graph::new();
    let (r, i) = (g.constant(rgb), g.constant(ir));
    let outs = det.forward(&mut g, ps, r, i)?;
    let (loss, parts) = detection_loss(&mut g, &outs, &targets, det.config.num_classes)?;
    let grads = g.backward(loss)?;
    ps.zero_grad();
    ps.accumulate(&g, &grads);
    Ok(parts)
}

/// Trains in place and returns the per-epoch mean loss.
pub fn train(det: &Detector, ps: &mut ParameterSet, scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let parts = batch_gradients(det, ps, &batch)?;
            if !parts.total().is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: parts.total(),
                });
            }
            Sgd::clip(ps, cfg.grad_clip);
            let lr = if step < warmup_steps {
                cfg.lr * (step + 1) as f64 / warmup_steps as f64
            } else {
                cfg.lr
            };
            sgd.step(ps, lr);
            let w = chunk.len() as f64 / scenes.len() as f64;
            sum.objectness += w * parts.objectness;
            sum.class += w * parts.class;
            sum.boxes += w * parts.boxes;
            step += 1;
        }
        trace.push(EpochLoss { epoch, parts: sum });
    }
    Ok(trace)
}
