//! Average precision with greedy score-ordered matching and an all-point
//! interpolated precision envelope.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{detection_order, iou, Detection, GroundTruth};

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// `max(precision[j])` over `j >= i`.
    pub envelope: Vec<f64>,
}

impl PrCurve {
    /// Area under the envelope, summed over recall steps.
    pub fn area(&self) -> f64 {
        let mut prev = 0.0;
        let mut ap = 0.0;
        for (&r, &p) in self.recall.iter().zip(&self.envelope) {
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }
}

/// Marks each detection of `class_id` as a true or false positive. Detections
/// are visited by descending score (ties by image, then [`detection_order`])
/// and each takes the highest-IoU unmatched ground truth of its class in the
/// same image, ties to the lower index.
pub fn match_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    class_id: usize,
    iou_threshold: f32,
) -> Vec<bool> {
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.0.cmp(&b.0))
            .then_with(|| detection_order(a.1, b.1))
    });
    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|&(img, d)| {
            let Some(gts) = ground_truth.get(img) else {
                return false;
            };
            let mut best: Option<(usize, f32)> = None;
            for (j, g) in gts.iter().enumerate() {
                if g.class_id != class_id || taken[img][j] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_threshold && best.map_or(true, |(_, b)| v.partial_cmp(&b) == Some(Ordering::Greater)) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn pr_curve(hits: &[bool], num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    PrCurve {
        recall,
        precision,
        envelope,
    }
}

/// AP for one class, or `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    class_id: usize,
    iou_threshold: f32,
) -> Option<f64> {
    let num_gt = ground_truth.iter().flatten().filter(|g| g.class_id == class_id).count();
    if num_gt == 0 {
        return None;
    }
    let hits = match_detections(detections, ground_truth, class_id, iou_threshold);
    Some(pr_curve(&hits, num_gt).area())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub per_class: Vec<ClassAp>,
    /// Mean AP over classes with at least one ground truth; 0 if none.
    pub map: f64,
}

pub fn mean_average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_threshold: f32,
) -> MapSummary {
    let per_class: Vec<ClassAp> = (0..num_classes)
        .map(|c| ClassAp {
            class_id: c,
            ap: average_precision(detections, ground_truth, c, iou_threshold),
            num_gt: ground_truth.iter().flatten().filter(|g| g.class_id == c).count(),
            num_detections: detections.iter().flatten().filter(|d| d.class_id == c).count(),
        })
        .collect();
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    MapSummary { per_class, map }
}
