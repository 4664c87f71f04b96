//! Box overlap and mAP50 scoring.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Axis-aligned box in pixel coordinates with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    fn check(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            })
        }
    }
}

/// Intersection over union. Zero-area boxes are rejected.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall at each distinct score threshold, highest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Average precision for one class.
///
/// Detections are visited by descending score (stable, so ties keep input
/// order) and each claims the unmatched ground truth of highest IoU at or
/// above `iou_threshold` in its own image. Curve points are emitted once per
/// distinct score so tied detections enter together. AP is the area under
/// the monotone precision envelope. Returns `None` when `gts` is empty.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Option<PrCurve> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut points = Vec::new();
    for (rank, &di) in order.iter().enumerate() {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.image != d.image {
                continue;
            }
            let o = iou_unchecked(&d.bbox, &gt.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
        }
        let last_of_tie = order.get(rank + 1).is_none_or(|&next| dets[next].score != d.score);
        if last_of_tie {
            points.push(PrPoint {
                recall: tp as f64 / gts.len() as f64,
                precision: tp as f64 / (rank + 1) as f64,
            });
        }
    }

    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Some(PrCurve { points, ap })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// AP per class id; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map50: f64,
}

impl MapReport {
    /// `class <id> ap50 <value>` lines followed by `map50 <value>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, ap) in self.per_class.iter().enumerate() {
            match ap {
                Some(v) => writeln!(out, "class {c} ap50 {v:.4}").unwrap(),
                None => writeln!(out, "class {c} ap50 undefined").unwrap(),
            }
        }
        writeln!(out, "map50 {:.4}", self.map50).unwrap();
        out
    }
}

/// Mean of per-class AP at IoU 0.5 over classes that have ground truth.
pub fn map50(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> Result<MapReport> {
    map_at(dets, gts, num_classes, DEFAULT_IOU_THRESHOLD)
}

pub fn map_at(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_threshold: f64) -> Result<MapReport> {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            average_precision(&d, &g, iou_threshold).map(|pr| pr.ap)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let map50 = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MapReport { per_class, map50 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: usize, score: f64, b: BBox) -> Detection {
        Detection {
            image,
            class_id: 0,
            score,
            bbox: b,
        }
    }

    fn gt(image: usize, b: BBox) -> GroundTruth {
        GroundTruth {
            image,
            class_id: 0,
            bbox: b,
        }
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        let b = BBox::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 2.0)).is_err());
    }

    #[test]
    fn exact_match_any_score_is_perfect() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        for s in [0.01, 0.5, 1.0] {
            let pr = average_precision(&[det(0, s, b)], &[gt(0, b)], 0.5).unwrap();
            assert_eq!(pr.ap, 1.0);
        }
    }

    #[test]
    fn below_threshold_is_zero() {
        // overlap 0.4: intersection 4 of union 10
        let g = BBox::new(0.0, 0.0, 7.0, 1.0);
        let d = BBox::new(3.0, 0.0, 10.0, 1.0);
        assert!((iou_unchecked(&g, &d) - 4.0 / 10.0).abs() < 1e-15);
        let pr = average_precision(&[det(0, 0.9, d)], &[gt(0, g)], 0.5).unwrap();
        assert_eq!(pr.ap, 0.0);
    }

    #[test]
    fn detection_in_other_image_does_not_match() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let pr = average_precision(&[det(1, 0.9, b)], &[gt(0, b)], 0.5).unwrap();
        assert_eq!(pr.ap, 0.0);
    }

    #[test]
    fn empty_class_excluded_from_mean() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let gts = [gt(0, b)];
        let report = map50(&[det(0, 0.9, b)], &gts, 3).unwrap();
        assert_eq!(report.per_class, vec![Some(1.0), None, None]);
        assert_eq!(report.map50, 1.0);
        assert!(report.to_text().contains("class 1 ap50 undefined"));
        assert!(matches!(map50(&[], &[], 2), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn two_classes_one_and_zero() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let far = BBox::new(20.0, 20.0, 25.0, 25.0);
        let gts = [
            gt(0, b),
            GroundTruth {
                class_id: 1,
                ..gt(0, b)
            },
        ];
        let dets = [
            det(0, 0.9, b),
            Detection {
                class_id: 1,
                ..det(0, 0.9, far)
            },
        ];
        let r = map50(&dets, &gts, 2).unwrap();
        assert_eq!(r.map50, 0.5);
        assert_eq!(r.to_text(), "class 0 ap50 1.0000\nclass 1 ap50 0.0000\nmap50 0.5000\n");
    }

    #[test]
    fn tied_scores_enter_together() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let far = BBox::new(20.0, 20.0, 25.0, 25.0);
        let gts = [gt(0, b)];
        let a = average_precision(&[det(0, 0.5, b), det(0, 0.5, far)], &gts, 0.5).unwrap();
        let c = average_precision(&[det(0, 0.5, far), det(0, 0.5, b)], &gts, 0.5).unwrap();
        assert_eq!(a.ap, 0.5);
        assert_eq!(c.ap, 0.5);
    }
}
