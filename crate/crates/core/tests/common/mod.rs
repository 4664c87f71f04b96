//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use pacgnet_core::eval::iou;
use pacgnet_core::nn::{Module, ParameterSet};
use pacgnet_core::pfmg::Pfmg;
use pacgnet_core::scg::Scg;
use pacgnet_core::tape::NORM_EPS;
use pacgnet_core::{BBox, Detection, FeatureMap, GroundTruth, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_map(shape: Shape, rng: &mut ChaCha8Rng, scale: f64) -> FeatureMap {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

/// Per-sample, per-channel standardization written out longhand.
pub fn reference_norm(x: &FeatureMap) -> FeatureMap {
    let s = x.shape();
    let mut stats = vec![(0.0, 0.0); s.n * s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64;
            stats[n * s.c + c] = (mean, var);
        }
    }
    FeatureMap::from_fn(s, |n, c, y, xx| {
        let (m, v) = stats[n * s.c + c];
        (x.get(n, c, y, xx) - m) / (v + NORM_EPS).sqrt()
    })
}

/// Zeroed refiner outputs and gates driven to zero by a large negative bias.
pub fn suppress_scg(scg: &Scg, ps: &mut ParameterSet) {
    for part in ["rgb_refiner.expand", "ir_refiner.expand"] {
        ps.fill_prefix(&format!("{}.{part}", scg.name), 0.0);
    }
    for dir in ["ir_to_rgb", "rgb_to_ir"] {
        for gate in ["spatial_gate", "channel_gate"] {
            let p = format!("{}.{dir}.{gate}", scg.name);
            ps.fill(&format!("{p}.weight"), 0.0).unwrap();
            ps.fill(&format!("{p}.bias"), -60.0).unwrap();
        }
    }
}

pub fn pfmg_case(seed: u64) -> (Pfmg, ParameterSet, [FeatureMap; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, pc) = (4, 6);
    let pfmg = Pfmg::new("pfmg", c, pc);
    let mut ps = ParameterSet::init(&pfmg.param_decls(), seed).unwrap();
    for name in ps.names().map(str::to_string).collect::<Vec<_>>() {
        let v = ps.value(&name).unwrap();
        let data = v.data().iter().map(|x| x + rng.random_range(-0.5..0.5)).collect();
        ps.set(&name, data).unwrap();
    }
    let maps = [
        random_map(Shape::new(1, c, 3, 3), &mut rng, 2.0),
        random_map(Shape::new(1, c, 3, 3), &mut rng, 2.0),
        random_map(Shape::new(1, pc, 6, 6), &mut rng, 2.0),
        random_map(Shape::new(1, pc, 6, 6), &mut rng, 2.0),
    ];
    (pfmg, ps, maps)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..12) as f64;
    let y = rng.random_range(0..12) as f64;
    let w = rng.random_range(2..7) as f64;
    let h = rng.random_range(2..7) as f64;
    BBox::new(x, y, x + w, y + h)
}

pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.random_range(1..4);
    let gts: Vec<GroundTruth> = (0..rng.random_range(1..8))
        .map(|_| GroundTruth {
            image: rng.random_range(0..images),
            class_id: 0,
            bbox: random_box(rng),
        })
        .collect();
    let dets = (0..rng.random_range(0..15))
        .map(|_| {
            // jittered copies of ground truth plus pure noise
            let bbox = if rng.random_bool(0.6) {
                let g = gts[rng.random_range(0..gts.len())].bbox;
                let d = rng.random_range(-1..=1) as f64;
                BBox::new(g.x1 + d, g.y1, g.x2 + d, g.y2 + rng.random_range(0..2) as f64)
            } else {
                random_box(rng)
            };
            Detection {
                image: rng.random_range(0..images),
                class_id: 0,
                // coarse scores so ties are common
                score: rng.random_range(1..6) as f64 / 5.0,
                bbox,
            }
        })
        .collect();
    (dets, gts)
}

/// Precision and recall recomputed from scratch at every distinct score
/// threshold, then integrated over the distinct recall levels.
pub fn threshold_sweep_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.score >= t).collect();
        kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for (_, d) in &kept {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image != d.image {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox).unwrap();
                if o >= thr && best.map_or(true, |(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / kept.len() as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Repeatedly take the best remaining box and drop everything it overlaps.
pub fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (&remaining[i], &remaining[best]);
            if a.1.score > b.1.score || (a.1.score == b.1.score && a.0 < b.0) {
                best = i;
            }
        }
        let (_, top) = remaining.remove(best);
        remaining.retain(|(_, d)| {
            d.class_id != top.class_id || d.image != top.image || iou(&d.bbox, &top.bbox).unwrap() <= thr
        });
        out.push(top);
    }
    out
}

