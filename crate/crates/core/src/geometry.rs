//! Boxes, IoU, anchors, box coding and non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest log-scale offset accepted when decoding, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f32 = 4.135_166_6;

/// Axis-aligned box in absolute pixel corners, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn within(&self, width: f32, height: f32) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn clip(&self, width: f32, height: f32) -> Self {
        let x_min = self.x_min.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        Self::new(
            x_min,
            y_min,
            self.x_max.clamp(x_min, width),
            self.y_max.clamp(y_min, height),
        )
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union; zero for disjoint or zero-area boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Pixels between neighbouring grid cells.
    pub stride: f32,
    /// Anchor side length (square root of area) in pixels.
    pub scales: Vec<f32>,
    /// Width over height.
    pub ratios: Vec<f32>,
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w * self.per_location()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(Error::config("anchors.stride", "must be positive"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("anchors.scales", "must be non-empty and positive"));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("anchors.ratios", "must be non-empty and positive"));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::config("anchors.grid", "must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub config: AnchorConfig,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tiles anchors row-major over the grid, then by scale, then by ratio.
pub fn generate_anchors(config: &AnchorConfig) -> Result<AnchorSet> {
    config.validate()?;
    let mut boxes = Vec::with_capacity(config.len());
    for gy in 0..config.grid_h {
        for gx in 0..config.grid_w {
            let cx = (gx as f32 + 0.5) * config.stride;
            let cy = (gy as f32 + 0.5) * config.stride;
            for &scale in &config.scales {
                for &ratio in &config.ratios {
                    let r = ratio.sqrt();
                    boxes.push(BBox::from_center(cx, cy, scale * r, scale / r));
                }
            }
        }
    }
    Ok(AnchorSet {
        config: config.clone(),
        boxes,
    })
}

/// `(tx, ty, tw, th)` of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f32; 4]> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(Error::Validation(format!("anchor {anchor:?} has non-positive extent")));
    }
    let (w, h) = (gt.width(), gt.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Validation(format!("box {gt:?} has non-positive extent")));
    }
    let (cxa, cya) = anchor.center();
    let (cx, cy) = gt.center();
    Ok([(cx - cxa) / wa, (cy - cya) / ha, (w / wa).ln(), (h / ha).ln()])
}

/// Inverse of [`encode_box`]; log-scale offsets are capped at
/// [`MAX_LOG_SCALE`].
pub fn decode_box(anchor: &BBox, offsets: &[f32; 4]) -> Result<BBox> {
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite box offsets {offsets:?}")));
    }
    let (wa, ha) = (anchor.width(), anchor.height());
    let (cxa, cya) = anchor.center();
    let cx = cxa + offsets[0] * wa;
    let cy = cya + offsets[1] * ha;
    let w = wa * offsets[2].min(MAX_LOG_SCALE).exp();
    let h = ha * offsets[3].min(MAX_LOG_SCALE).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorMatch {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground-truth index for positive anchors.
    pub gt_index: Vec<Option<usize>>,
    /// `[A, 4]`; zero rows for non-positive anchors.
    pub reg_targets: Tensor,
    /// `[A, classes]`; one-hot rows for positive anchors.
    pub cls_targets: Tensor,
}

impl AnchorMatch {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }

    /// Anchors that contribute to the classification loss.
    pub fn cls_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != AnchorLabel::Ignore).collect()
    }

    /// Anchors that contribute to the regression loss.
    pub fn reg_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == AnchorLabel::Positive).collect()
    }
}

/// Labels every anchor by its highest-IoU ground truth (ties to the lowest GT
/// index), then forces each ground truth's best free anchor positive so no
/// object goes unmatched.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[GroundTruth],
    num_classes: usize,
    pos_iou: f32,
    neg_iou: f32,
) -> Result<AnchorMatch> {
    if anchors.is_empty() {
        return Err(Error::Validation("cannot match against an empty anchor set".into()));
    }
    if pos_iou < neg_iou {
        return Err(Error::config("pos_iou", "must be >= neg_iou"));
    }
    if let Some(gt) = gts.iter().find(|g| g.class_id >= num_classes) {
        return Err(Error::Validation(format!(
            "class {} outside 0..{num_classes}",
            gt.class_id
        )));
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut gt_index = vec![None; n];

    if !gts.is_empty() {
        let ious: Vec<Vec<f32>> = anchors
            .boxes
            .iter()
            .map(|a| gts.iter().map(|g| iou(a, &g.bbox)).collect())
            .collect();
        for (a, row) in ious.iter().enumerate() {
            let (best_g, best) = argmax_first(row);
            if best >= pos_iou {
                labels[a] = AnchorLabel::Positive;
                gt_index[a] = Some(best_g);
            } else if best >= neg_iou {
                labels[a] = AnchorLabel::Ignore;
            }
        }
        let mut forced = vec![false; n];
        for g in 0..gts.len() {
            let mut best_a = None;
            let mut best = f32::NEG_INFINITY;
            for (a, row) in ious.iter().enumerate() {
                if !forced[a] && row[g] > best {
                    best = row[g];
                    best_a = Some(a);
                }
            }
            if let Some(a) = best_a {
                forced[a] = true;
                labels[a] = AnchorLabel::Positive;
                gt_index[a] = Some(g);
            }
        }
    }

    let mut reg = vec![0f32; n * 4];
    let mut cls = vec![0f32; n * num_classes];
    for a in 0..n {
        if let Some(g) = gt_index[a] {
            let t = encode_box(&anchors.boxes[a], &gts[g].bbox)?;
            reg[a * 4..a * 4 + 4].copy_from_slice(&t);
            cls[a * num_classes + gts[g].class_id] = 1.0;
        }
    }
    Ok(AnchorMatch {
        labels,
        gt_index,
        reg_targets: Tensor::new(vec![n, 4], reg)?,
        cls_targets: Tensor::new(vec![n, num_classes], cls)?,
    })
}

fn argmax_first(values: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Total order used for greedy suppression: score descending, then
/// `x_min`, `y_min`, `x_max`, `y_max`, class ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy non-maximum suppression. A kept detection suppresses every later
/// detection (of the same class when `per_class`) with IoU at or above the
/// threshold. Output is in [`detection_order`].
pub fn nms(detections: &[Detection], iou_threshold: f32, per_class: bool) -> Vec<Detection> {
    let mut order: Vec<Detection> = detections.to_vec();
    order.sort_by(detection_order);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        keep.push(order[i]);
        for j in i + 1..order.len() {
            if suppressed[j] || (per_class && order[j].class_id != order[i].class_id) {
                continue;
            }
            if iou(&order[i].bbox, &order[j].bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
