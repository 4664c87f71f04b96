//! Activation heatmaps of the fused pyramid: per-pixel L2 norm across
//! channels.

use std::fmt::Write as _;

use crate::detect::dataset::encode_pgm;
use crate::detect::model::Detector;
use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::tape::Graph;
use crate::tensor::{FeatureMap, Shape};

/// `(1, 1, H, W)` channel-L2 magnitude of fused levels P3, P4, P5 for a
/// single image pair.
pub fn fused_magnitudes(det: &Detector, ps: &ParameterSet, rgb: &FeatureMap, ir: &FeatureMap) -> Result<[FeatureMap; 3]> {
    if rgb.shape().n != 1 {
        return Err(Error::InvalidShape(format!("heatmaps take one image, got {}", rgb.shape())));
    }
    let mut g = Graph::new();
    let (r, i) = (g.constant(rgb.clone()), g.constant(ir.clone()));
    let fused = det.pyramid.forward(&mut g, ps, r, i)?;
    Ok(fused.levels.map(|v| channel_magnitude(g.value(v))))
}

pub fn channel_magnitude(m: &FeatureMap) -> FeatureMap {
    let s = m.shape();
    FeatureMap::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
        (0..s.c).map(|c| m.get(n, c, y, x).powi(2)).sum::<f64>().sqrt()
    })
}

/// `max - min` over the map.
pub fn spread(m: &FeatureMap) -> f64 {
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Min-max normalization to 0..=255. A flat map becomes all zeros.
pub fn to_pgm(m: &FeatureMap) -> Vec<u8> {
    let s = m.shape();
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let range = spread(m);
    let pixels: Vec<u8> = m
        .data()
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    encode_pgm(s.w, s.h, &pixels)
}

/// One CSV row per image row, no header.
pub fn to_csv(m: &FeatureMap) -> String {
    let s = m.shape();
    let mut out = String::new();
    for y in 0..s.h {
        let row: Vec<String> = (0..s.w).map(|x| m.get(0, 0, y, x).to_string()).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}
