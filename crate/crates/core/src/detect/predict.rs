use crate::detect::model::{decode_box, Detector};
use crate::detect::synth::Scene;
use crate::error::Result;
use crate::eval::{iou_unchecked, Detection};
use crate::nn::ParameterSet;
use crate::pyramid::FUSED_STRIDES;
use crate::tape::{sigmoid_scalar, Graph};
use crate::tensor::{FeatureMap, Shape};

pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Greedy per-class suppression. Input order breaks score ties; the result
/// is sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.class_id == d.class_id && k.image == d.image && iou_unchecked(&k.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Decodes every cell whose score exceeds `score_threshold`. The score of a
/// cell is `sigmoid(objectness) * sigmoid(best class logit)`.
pub fn decode_outputs(
    outputs: &[FeatureMap; 3],
    num_classes: usize,
    image_ids: &[usize],
    score_threshold: f64,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (l, out) in outputs.iter().enumerate() {
        let s: Shape = out.shape();
        for (n, &image) in image_ids.iter().enumerate().take(s.n) {
            for row in 0..s.h {
                for col in 0..s.w {
                    let obj = sigmoid_scalar(out.get(n, 0, row, col));
                    let (class_id, logit) = (0..num_classes)
                        .map(|c| (c, out.get(n, 1 + c, row, col)))
                        .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
                    let score = obj * sigmoid_scalar(logit);
                    if score <= score_threshold {
                        continue;
                    }
                    let raw = std::array::from_fn(|i| out.get(n, 1 + num_classes + i, row, col));
                    dets.push(Detection {
                        image,
                        class_id,
                        score,
                        bbox: decode_box(raw, row, col, FUSED_STRIDES[l]),
                    });
                }
            }
        }
    }
    dets
}

/// Head outputs for a batch of scenes, no tape retained.
pub fn infer(det: &Detector, ps: &ParameterSet, scenes: &[&Scene]) -> Result<[FeatureMap; 3]> {
    let rgb = FeatureMap::stack(&scenes.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
    let ir = FeatureMap::stack(&scenes.iter().map(|s| &s.ir).collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let (r, i) = (g.constant(rgb), g.constant(ir));
    let outs = det.forward(&mut g, ps, r, i)?;
    Ok(outs.map(|v| g.value(v).clone()))
}

/// Detections for one scene, tagged with `image`.
pub fn predict(
    det: &Detector,
    ps: &ParameterSet,
    scene: &Scene,
    image: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let outs = infer(det, ps, &[scene])?;
    Ok(nms(
        &decode_outputs(&outs, det.config.num_classes, &[image], score_threshold),
        nms_iou,
    ))
}

/// Detections for many scenes, image ids are scene indices.
pub fn predict_all(
    det: &Detector,
    ps: &ParameterSet,
    scenes: &[Scene],
    score_threshold: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for (b, chunk) in scenes.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let ids: Vec<usize> = (0..chunk.len()).map(|i| b * batch_size.max(1) + i).collect();
        let outs = infer(det, ps, &refs)?;
        let raw = decode_outputs(&outs, det.config.num_classes, &ids, score_threshold);
        all.extend(nms(&raw, nms_iou));
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::BBox;

    fn d(score: f64, b: BBox) -> Detection {
        Detection {
            image: 0,
            class_id: 0,
            score,
            bbox: b,
        }
    }

    #[test]
    fn identical_boxes_keep_highest() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[d(0.8, b), d(0.9, b)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn other_class_is_not_suppressed() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let other = Detection { class_id: 1, ..d(0.8, b) };
        assert_eq!(nms(&[d(0.9, b), other], 0.5).len(), 2);
    }

    #[test]
    fn threshold_above_one_yields_nothing() {
        let s = Shape::new(1, 7, 2, 2);
        let outs = [FeatureMap::full(s, 50.0), FeatureMap::full(s.with_hw(1, 1), 50.0), FeatureMap::full(s.with_hw(1, 1), 50.0)];
        assert!(decode_outputs(&outs, 2, &[0], 1.0 + 1e-9).is_empty());
        assert_eq!(decode_outputs(&outs, 2, &[0], 0.5).len(), 6);
    }
}
