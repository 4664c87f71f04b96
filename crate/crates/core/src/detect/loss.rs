//! Center-cell target assignment and the detection loss
//! `BCE(objectness) + BCE(class) + (1 - IoU)`.
//!
//! The loss is a single tape node whose local gradient is computed in
//! closed form here.

use crate::detect::model::{decode_box, level_for_size, MAX_SIZE_LOGIT};
use crate::detect::synth::SceneObject;
use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::pyramid::FUSED_STRIDES;
use crate::tape::{sigmoid_scalar, Graph, Var};
use crate::tensor::Shape;

/// One positive cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Assigns each object to the cell containing its center on the level
/// chosen by [`level_for_size`]. A cell already claimed keeps its first
/// object.
pub fn assign_targets(objects: &[SceneObject], input_size: usize) -> Vec<Target> {
    let mut out: Vec<Target> = Vec::with_capacity(objects.len());
    for o in objects {
        let b = o.bbox;
        let level = level_for_size(b.width().max(b.height()));
        let stride = FUSED_STRIDES[level];
        let cells = (input_size / stride).max(1);
        let cx = (b.x1 + b.x2) / 2.0;
        let cy = (b.y1 + b.y2) / 2.0;
        let col = ((cx / stride as f64).floor().max(0.0) as usize).min(cells - 1);
        let row = ((cy / stride as f64).floor().max(0.0) as usize).min(cells - 1);
        if out.iter().any(|t| (t.level, t.row, t.col) == (level, row, col)) {
            continue;
        }
        out.push(Target {
            level,
            row,
            col,
            class_id: o.class_id,
            bbox: b,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub objectness: f64,
    pub class: f64,
    pub boxes: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.objectness + self.class + self.boxes
    }
}

/// `(loss, dloss/dz)` of binary cross-entropy on logit `z`.
#[inline]
fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid_scalar(z) - y)
}

/// `1 - IoU` of the decoded box and its gradient with respect to the raw
/// offsets `(tx, ty, tw, th)`.
pub fn iou_loss(raw: [f64; 4], row: usize, col: usize, stride: usize, target: &BBox) -> (f64, [f64; 4]) {
    let p = decode_box(raw, row, col, stride);
    let t = target;
    let iw = p.x2.min(t.x2) - p.x1.max(t.x1);
    let ih = p.y2.min(t.y2) - p.y1.max(t.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let (wp, hp) = (p.width(), p.height());
    let union = wp * hp + t.area() - inter;
    let iou = inter / union;

    // d inter / d (x1, y1, x2, y2) of the prediction
    let di = [
        if p.x1 > t.x1 { -ih } else { 0.0 },
        if p.y1 > t.y1 { -iw } else { 0.0 },
        if p.x2 < t.x2 { ih } else { 0.0 },
        if p.y2 < t.y2 { iw } else { 0.0 },
    ];
    let da = [-hp, -wp, hp, wp];
    let k_i = 1.0 / union + inter / (union * union);
    let k_a = inter / (union * union);
    let d: Vec<f64> = (0..4).map(|i| di[i] * k_i - da[i] * k_a).collect();

    let s = stride as f64;
    let d_cx = d[0] + d[2];
    let d_cy = d[1] + d[3];
    let d_w = (d[2] - d[0]) / 2.0;
    let d_h = (d[3] - d[1]) / 2.0;
    let sx = sigmoid_scalar(raw[0]);
    let sy = sigmoid_scalar(raw[1]);
    let dw_dt = if raw[2].abs() < MAX_SIZE_LOGIT { wp } else { 0.0 };
    let dh_dt = if raw[3].abs() < MAX_SIZE_LOGIT { hp } else { 0.0 };
    let grad_iou = [d_cx * s * sx * (1.0 - sx), d_cy * s * sy * (1.0 - sy), d_w * dw_dt, d_h * dh_dt];
    (1.0 - iou, grad_iou.map(|g| -g))
}

/// Scalar loss over a batch, averaged over images. `outputs` are the raw
/// head maps for strides 8, 16, 32; `targets[n]` the positives of image `n`.
pub fn detection_loss(
    g: &mut Graph,
    outputs: &[Var; 3],
    targets: &[Vec<Target>],
    num_classes: usize,
) -> Result<(Var, LossParts)> {
    let shapes: Vec<Shape> = outputs.iter().map(|&v| g.shape(v)).collect();
    let batch = shapes[0].n;
    if targets.len() != batch {
        return Err(Error::InvalidShape(format!(
            "{} target lists for a batch of {batch}",
            targets.len()
        )));
    }
    for s in &shapes {
        if s.c != 5 + num_classes || s.n != batch {
            return Err(Error::InvalidShape(format!(
                "head output {s} does not carry {} channels",
                5 + num_classes
            )));
        }
    }
    let norm = 1.0 / batch as f64;
    let mut parts = LossParts::default();
    let mut local: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.numel()]).collect();

    for (l, &out) in outputs.iter().enumerate() {
        let s = shapes[l];
        let v = g.value(out).data();
        let grad = &mut local[l];
        for n in 0..batch {
            for row in 0..s.h {
                for col in 0..s.w {
                    let positive = targets[n].iter().any(|t| (t.level, t.row, t.col) == (l, row, col));
                    let k = s.index(n, 0, row, col);
                    let (loss, d) = bce_with_logits(v[k], if positive { 1.0 } else { 0.0 });
                    parts.objectness += norm * loss;
                    grad[k] += norm * d;
                }
            }
        }
        for (n, ts) in targets.iter().enumerate() {
            for t in ts.iter().filter(|t| t.level == l) {
                let (row, col) = (t.row, t.col);
                if row >= s.h || col >= s.w {
                    return Err(Error::InvalidShape(format!("target cell ({row}, {col}) outside {s}")));
                }
                for c in 0..num_classes {
                    let k = s.index(n, 1 + c, row, col);
                    let (loss, d) = bce_with_logits(v[k], if c == t.class_id { 1.0 } else { 0.0 });
                    parts.class += norm * loss;
                    grad[k] += norm * d;
                }
                let idx: [usize; 4] = std::array::from_fn(|i| s.index(n, 1 + num_classes + i, row, col));
                let raw = idx.map(|k| v[k]);
                let (loss, d) = iou_loss(raw, row, col, FUSED_STRIDES[l], &t.bbox);
                parts.boxes += norm * loss;
                for (k, dk) in idx.iter().zip(d) {
                    grad[*k] += norm * dk;
                }
            }
        }
    }
    let loss = g.custom_scalar(outputs, parts.total(), local)?;
    Ok((loss, parts))
}
