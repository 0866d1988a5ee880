//! Brute-force references and generators for the geometry, fusion and
//! evaluation properties.

use std::cmp::Ordering;

use gatefuse::detector::ExpertOutput;
use gatefuse::geometry::{iou, AnchorLabel, BBox, Detection, GroundTruth};
use gatefuse::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Boxes on an integer grid: IoUs are small-denominator rationals, so
/// threshold tests against dyadic values agree between f32 and f64.
pub fn grid_box(max: i32) -> impl Strategy<Value = BBox> {
    (0..max, 0..max, 1..max / 2, 1..max / 2)
        .prop_map(|(x, y, w, h)| BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32))
}

pub fn iou_f64(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.to_array().map(f64::from);
    let [bx0, by0, bx1, by1] = b.to_array().map(f64::from);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Up to `max` detections with scores drawn from a small set so that ties
/// are common; some boxes repeat exactly.
pub fn detections(max: usize, classes: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec(
        (grid_box(12), 0..classes, prop::sample::select(vec![0.2f32, 0.4, 0.5, 0.9]), prop::bool::weighted(0.2)),
        0..=max,
    )
    .prop_map(|raw| {
        let mut out: Vec<Detection> = Vec::new();
        for (bbox, class_id, score, repeat) in raw {
            let bbox = match (repeat, out.last()) {
                (true, Some(prev)) => prev.bbox,
                _ => bbox,
            };
            out.push(Detection { bbox, class_id, score });
        }
        out
    })
}

fn rank_key(d: &Detection) -> (f32, [f32; 4], usize) {
    (-d.score, d.bbox.to_array(), d.class_id)
}

/// Strictly earlier in suppression order: higher score, then smaller
/// coordinates, then smaller class.
pub fn precedes(a: &Detection, b: &Detection) -> bool {
    let (ka, kb) = (rank_key(a), rank_key(b));
    ka.partial_cmp(&kb) == Some(Ordering::Less)
}

pub fn conflicts(a: &Detection, b: &Detection, per_class: bool) -> bool {
    !per_class || a.class_id == b.class_id
}

/// A detection survives iff no earlier surviving detection overlaps it at
/// or above the threshold.
pub fn nms_oracle(dets: &[Detection], thr: f64, per_class: bool) -> Vec<Detection> {
    let n = dets.len();
    // position of each detection = number of detections strictly ahead,
    // with exact duplicates kept in input order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (0..n).filter(|&j| precedes(&dets[j], &dets[i]) || (j < i && !precedes(&dets[i], &dets[j]))).count());
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = dets[i];
        if !kept.iter().any(|k| conflicts(k, &d, per_class) && iou_f64(&k.bbox, &d.bbox) >= thr) {
            kept.push(d);
        }
    }
    kept
}

pub fn ground_truths(max: usize, classes: usize) -> impl Strategy<Value = Vec<GroundTruth>> {
    prop::collection::vec((0i32..24, 0i32..24, 4i32..16, 4i32..16, 0..classes), 1..=max).prop_map(|raw| {
        raw.into_iter()
            .map(|(x, y, w, h, class_id)| GroundTruth {
                bbox: BBox::new(x as f32, y as f32, (x + w).min(32) as f32, (y + h).min(32) as f32),
                class_id,
            })
            .collect()
    })
}

/// Label by best IoU (first ground truth on ties), then give each ground
/// truth in turn its best anchor not already given to an earlier one.
pub fn match_oracle(
    anchors: &[BBox],
    gts: &[GroundTruth],
    pos: f64,
    neg: f64,
) -> (Vec<AnchorLabel>, Vec<Option<usize>>) {
    let mut labels = Vec::new();
    let mut assigned = Vec::new();
    for a in anchors {
        let ious: Vec<f64> = gts.iter().map(|g| iou(a, &g.bbox) as f64).collect();
        let best = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = ious.iter().position(|&v| v == best).unwrap();
        if best >= pos {
            labels.push(AnchorLabel::Positive);
            assigned.push(Some(first));
        } else if best >= neg {
            labels.push(AnchorLabel::Ignore);
            assigned.push(None);
        } else {
            labels.push(AnchorLabel::Negative);
            assigned.push(None);
        }
    }
    let mut taken = vec![false; anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let ious: Vec<f32> = anchors.iter().map(|a| iou(a, &gt.bbox)).collect();
        let best = (0..anchors.len())
            .filter(|&a| !taken[a])
            .max_by(|&x, &y| ious[x].total_cmp(&ious[y]).then(y.cmp(&x)))
            .unwrap();
        taken[best] = true;
        labels[best] = AnchorLabel::Positive;
        assigned[best] = Some(g);
    }
    (labels, assigned)
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| (v / z) as f32).collect()
}

pub fn random_outputs(n: usize, anchors: usize, classes: usize, seed: u64) -> Vec<ExpertOutput> {
    let mut r = super::rng(seed);
    (0..n)
        .map(|_| ExpertOutput {
            cls_probs: Tensor::new(vec![anchors, classes], (0..anchors * classes).map(|_| r.gen_range(0.0..1.0)).collect())
                .unwrap(),
            reg_offsets: Tensor::new(vec![anchors, 4], (0..anchors * 4).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap(),
        })
        .collect()
}

pub type ApCase = (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>);

/// Up to `max_dets` detections and `max_gts` ground truths of two classes
/// spread over up to `max_images` images, on a small grid so overlaps and
/// score ties are frequent.
pub fn ap_case(max_dets: usize, max_gts: usize, max_images: usize) -> impl Strategy<Value = ApCase> {
    let gts = prop::collection::vec((0..max_images, grid_box(8), 0usize..2), 0..=max_gts);
    let dets = prop::collection::vec(
        (0..max_images, grid_box(8), 0usize..2, prop::sample::select(vec![0.3f32, 0.6, 0.8, 0.95])),
        0..=max_dets,
    );
    (1..=max_images, gts, dets).prop_map(|(images, gts, dets)| {
        let mut g = vec![Vec::new(); images];
        for (img, bbox, class_id) in gts {
            g[img % images].push(GroundTruth { bbox, class_id });
        }
        let mut d = vec![Vec::new(); images];
        for (img, bbox, class_id, score) in dets {
            d[img % images].push(Detection { bbox, class_id, score });
        }
        (d, g)
    })
}

/// All-point AP by direct enumeration: walk detections in rank order, match
/// greedily, and sum `max_{j >= i} precision_j` over true positives `i`.
pub fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thr: f64) -> Option<f64> {
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, Detection)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        ranked.extend(ds.iter().filter(|d| d.class_id == class).map(|d| (img, *d)));
    }
    ranked.sort_by(|a, b| {
        (-a.1.score, a.0, a.1.bbox.to_array(), a.1.class_id)
            .partial_cmp(&(-b.1.score, b.0, b.1.bbox.to_array(), b.1.class_id))
            .unwrap()
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for (img, d) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if g.class_id != class || taken[*img][j] {
                continue;
            }
            let v = iou_f64(&d.bbox, &g.bbox);
            if v >= thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[*img][j] = true;
        }
        hits.push(best.is_some());
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
        .collect();
    let sum: f64 = (0..hits.len())
        .filter(|&i| hits[i])
        .map(|i| precision[i..].iter().cloned().fold(0.0, f64::max))
        .sum();
    Some(sum / num_gt as f64)
}
