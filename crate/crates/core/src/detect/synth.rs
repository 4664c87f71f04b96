//! Synthetic registered RGB/IR scenes with complementary object visibility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::tensor::{FeatureMap, Shape};

/// Background level shared by both modalities before clutter and noise.
pub const BACKGROUND: f64 = 0.2;

const PLACEMENT_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Visibility {
    Both,
    RgbOnly,
    IrOnly,
}

impl Visibility {
    pub fn in_rgb(self) -> bool {
        matches!(self, Visibility::Both | Visibility::RgbOnly)
    }

    pub fn in_ir(self) -> bool {
        matches!(self, Visibility::Both | Visibility::IrOnly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side lengths in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Relative frequency of each visibility mode.
    pub vis_both: f64,
    pub vis_rgb_only: f64,
    pub vis_ir_only: f64,
    /// Amplitude of low-frequency background structure, drawn independently
    /// per modality.
    pub clutter: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_classes: 2,
            min_objects: 1,
            max_objects: 3,
            min_size: 6,
            max_size: 14,
            vis_both: 1.0,
            vis_rgb_only: 1.0,
            vis_ir_only: 1.0,
            clutter: 0.1,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!("image size {} too small", self.image_size));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size >= self.image_size {
            return bad(format!(
                "object sizes {}..={} must satisfy 4 <= min <= max < image size",
                self.min_size, self.max_size
            ));
        }
        let weights = [self.vis_both, self.vis_rgb_only, self.vis_ir_only];
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return bad("visibility weights must be non-negative and not all zero".into());
        }
        if !(self.clutter >= 0.0) || !(self.noise >= 0.0) {
            return bad("clutter and noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: BBox,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `1 x 3 x S x S`, values in `[0, 1]`, quantized to 8 bits.
    pub rgb: FeatureMap,
    pub ir: FeatureMap,
    pub objects: Vec<SceneObject>,
    /// Objects requested but not placed after bounded retries.
    pub dropped: usize,
}

/// RGB color of class `k`. Classes differ in hue.
pub fn class_color(k: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [[0.9, 0.25, 0.2], [0.25, 0.85, 0.3], [0.3, 0.35, 0.95], [0.9, 0.85, 0.2]];
    PALETTE[k % PALETTE.len()]
}

/// IR intensity of class `k`. Classes differ in temperature.
pub fn class_heat(k: usize) -> f64 {
    const HEAT: [f64; 4] = [0.95, 0.6, 0.8, 0.45];
    HEAT[k % HEAT.len()]
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn clutter_field(rng: &mut ChaCha8Rng, amplitude: f64) -> Vec<Wave> {
    (0..3)
        .map(|_| Wave {
            fx: rng.random_range(0.02..0.12),
            fy: rng.random_range(0.02..0.12),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: amplitude * rng.random_range(0.3..1.0) / 3.0,
        })
        .collect()
}

fn clutter_at(waves: &[Wave], x: f64, y: f64) -> f64 {
    waves
        .iter()
        .map(|w| w.amp * (std::f64::consts::TAU * (w.fx * x + w.fy * y) + w.phase).sin())
        .sum()
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn overlaps(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x1 < b.x2 + gap && b.x1 < a.x2 + gap && a.y1 < b.y2 + gap && b.y1 < a.y2 + gap
}

/// Generates `count` scenes. Scene `i` draws from a stream seeded by
/// `(cfg.seed, i)` so prefixes of a dataset are stable.
pub fn generate(cfg: &SynthConfig, count: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            Ok(generate_one(cfg, &mut rng))
        })
        .collect()
}

fn generate_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let s = cfg.image_size;
    let wanted = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let total_w = cfg.vis_both + cfg.vis_rgb_only + cfg.vis_ir_only;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(wanted);
    let mut dropped = 0;
    for _ in 0..wanted {
        let class_id = rng.random_range(0..cfg.num_classes);
        let r = rng.random_range(0.0..total_w);
        let visibility = if r < cfg.vis_both {
            Visibility::Both
        } else if r < cfg.vis_both + cfg.vis_rgb_only {
            Visibility::RgbOnly
        } else {
            Visibility::IrOnly
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.random_range(cfg.min_size..=cfg.max_size);
            let h = rng.random_range(cfg.min_size..=cfg.max_size);
            let x = rng.random_range(0..=s - w);
            let y = rng.random_range(0..=s - h);
            let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            if objects.iter().all(|o| !overlaps(&o.bbox, &b, 2.0)) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(bbox) => objects.push(SceneObject {
                class_id,
                bbox,
                visibility,
            }),
            None => dropped += 1,
        }
    }

    let rgb_waves = clutter_field(rng, cfg.clutter);
    let ir_waves = clutter_field(rng, cfg.clutter);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).unwrap();
    let shape = Shape::new(1, 3, s, s);
    let mut rgb = vec![0.0; shape.numel()];
    let mut ir = vec![0.0; shape.numel()];
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = objects
                .iter()
                .find(|o| fx > o.bbox.x1 && fx < o.bbox.x2 && fy > o.bbox.y1 && fy < o.bbox.y2);
            let rgb_bg = BACKGROUND + clutter_at(&rgb_waves, fx, fy);
            let ir_bg = BACKGROUND + clutter_at(&ir_waves, fx, fy);
            let rgb_px = match inside {
                Some(o) if o.visibility.in_rgb() => class_color(o.class_id),
                _ => [rgb_bg; 3],
            };
            let ir_px = match inside {
                Some(o) if o.visibility.in_ir() => class_heat(o.class_id),
                _ => ir_bg,
            };
            for c in 0..3 {
                let k = shape.index(0, c, y, x);
                let (nr, ni) = if cfg.noise > 0.0 {
                    (noise.sample(rng), noise.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                rgb[k] = quantize(rgb_px[c] + nr);
                ir[k] = quantize(ir_px + ni);
            }
        }
    }
    Scene {
        rgb: FeatureMap::new(shape, rgb).unwrap(),
        ir: FeatureMap::new(shape, ir).unwrap(),
        objects,
        dropped,
    }
}
