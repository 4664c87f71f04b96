//! Flat `key=value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::detect::synth::SynthConfig;
use crate::detect::train::TrainConfig;
use crate::error::{Error, Result};
use crate::pyramid::PyramidConfig;

/// Ordered `key=value` pairs. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            let k = k.trim();
            if kv.get(k).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            kv.pairs.push((k.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.pairs.push((key.to_string(), value)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid list `{v}` for `{key}`")))
        })
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl SynthConfig {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("image_size", self.image_size);
        kv.set("num_classes", self.num_classes);
        kv.set("min_objects", self.min_objects);
        kv.set("max_objects", self.max_objects);
        kv.set("min_size", self.min_size);
        kv.set("max_size", self.max_size);
        kv.set("vis_both", self.vis_both);
        kv.set("vis_rgb_only", self.vis_rgb_only);
        kv.set("vis_ir_only", self.vis_ir_only);
        kv.set("clutter", self.clutter);
        kv.set("noise", self.noise);
        kv.set("seed", self.seed);
        kv
    }
}

/// Everything a command needs. All keys have defaults; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub widths: [usize; 5],
    pub enable_scg: bool,
    pub enable_pfmg_gate: bool,
    pub train: TrainConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Seeds of the repeated ablation runs.
    pub ablate_seeds: Vec<u64>,
    /// Scenes generated per seed for the ablation's train split when no
    /// data directory is given.
    pub ablate_train_count: usize,
    pub ablate_test_count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            widths: PyramidConfig::default().widths,
            enable_scg: true,
            enable_pfmg_gate: true,
            train: TrainConfig::default(),
            score_threshold: 0.01,
            nms_iou: 0.5,
            ablate_seeds: vec![0, 1, 2],
            ablate_train_count: 100,
            ablate_test_count: 20,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "image_size",
    "num_classes",
    "min_objects",
    "max_objects",
    "min_size",
    "max_size",
    "vis_both",
    "vis_rgb_only",
    "vis_ir_only",
    "clutter",
    "noise",
    "widths",
    "enable_scg",
    "enable_pfmg_gate",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "warmup_epochs",
    "grad_clip",
    "score_threshold",
    "nms_iou",
    "ablate_seeds",
    "ablate_train_count",
    "ablate_test_count",
    "seed",
    "out",
];

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let mut c = RunConfig::default();
        macro_rules! take {
            ($key:literal => $field:expr) => {
                if let Some(v) = kv.get_parsed($key)? {
                    $field = v;
                }
            };
        }
        take!("image_size" => c.synth.image_size);
        take!("num_classes" => c.synth.num_classes);
        take!("min_objects" => c.synth.min_objects);
        take!("max_objects" => c.synth.max_objects);
        take!("min_size" => c.synth.min_size);
        take!("max_size" => c.synth.max_size);
        take!("vis_both" => c.synth.vis_both);
        take!("vis_rgb_only" => c.synth.vis_rgb_only);
        take!("vis_ir_only" => c.synth.vis_ir_only);
        take!("clutter" => c.synth.clutter);
        take!("noise" => c.synth.noise);
        take!("enable_scg" => c.enable_scg);
        take!("enable_pfmg_gate" => c.enable_pfmg_gate);
        take!("epochs" => c.train.epochs);
        take!("batch_size" => c.train.batch_size);
        take!("lr" => c.train.lr);
        take!("momentum" => c.train.momentum);
        take!("weight_decay" => c.train.weight_decay);
        take!("warmup_epochs" => c.train.warmup_epochs);
        take!("grad_clip" => c.train.grad_clip);
        take!("score_threshold" => c.score_threshold);
        take!("nms_iou" => c.nms_iou);
        take!("ablate_train_count" => c.ablate_train_count);
        take!("ablate_test_count" => c.ablate_test_count);
        take!("seed" => c.seed);
        if let Some(v) = kv.get("widths") {
            let w: Vec<usize> = parse_list("widths", v)?;
            c.widths = w
                .try_into()
                .map_err(|_| Error::Config("widths needs exactly 5 values".into()))?;
        }
        if let Some(v) = kv.get("ablate_seeds") {
            c.ablate_seeds = parse_list("ablate_seeds", v)?;
        }
        if let Some(v) = kv.get("out") {
            c.out = PathBuf::from(v);
        }
        c.synth.seed = c.seed;
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pyramid_config().validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if self.ablate_seeds.is_empty() {
            return Err(Error::Config("ablate_seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn pyramid_config(&self) -> PyramidConfig {
        PyramidConfig {
            input_size: self.synth.image_size,
            widths: self.widths,
            enable_scg: self.enable_scg,
            enable_pfmg: self.enable_pfmg_gate,
        }
    }

    /// Same configuration with a different seed everywhere.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.synth.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.synth.to_key_values();
        kv.set("widths", join(&self.widths));
        kv.set("enable_scg", self.enable_scg);
        kv.set("enable_pfmg_gate", self.enable_pfmg_gate);
        kv.set("epochs", self.train.epochs);
        kv.set("batch_size", self.train.batch_size);
        kv.set("lr", self.train.lr);
        kv.set("momentum", self.train.momentum);
        kv.set("weight_decay", self.train.weight_decay);
        kv.set("warmup_epochs", self.train.warmup_epochs);
        kv.set("grad_clip", self.train.grad_clip);
        kv.set("score_threshold", self.score_threshold);
        kv.set("nms_iou", self.nms_iou);
        kv.set("ablate_seeds", join(&self.ablate_seeds));
        kv.set("ablate_train_count", self.ablate_train_count);
        kv.set("ablate_test_count", self.ablate_test_count);
        kv.set("seed", self.seed);
        kv.set("out", self.out.display());
        kv
    }

    /// The fully resolved configuration, one `key=value` per line.
    pub fn resolved(&self) -> String {
        self.to_key_values().to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved_text() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.resolved()).unwrap(), c);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.momentum, 0.937);
        assert_eq!(c.train.weight_decay, 0.0005);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.synth.image_size, 64);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(RunConfig::from_text("bogus=1").is_err());
        assert!(RunConfig::from_text("epochs=abc").is_err());
        assert!(RunConfig::from_text("epochs").is_err());
        assert!(RunConfig::from_text("epochs=1\nepochs=2").is_err());
        assert!(RunConfig::from_text("widths=8,16").is_err());
        assert!(RunConfig::from_text("image_size=48").is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_text("# toy\nepochs = 3\nwidths=4,4,4,4,4\nseed=7\nenable_scg=false\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.widths, [4; 5]);
        assert_eq!(c.synth.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert!(!c.enable_scg);
    }
}
