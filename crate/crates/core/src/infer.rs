//! Post-processing of fused outputs into detections, and dataset evaluation.

use serde::{Deserialize, Serialize};

use crate::detector::ExpertOutput;
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, MapSummary};
use crate::gating::{fuse, Ensemble};
use crate::geometry::{decode_box, nms, AnchorSet, Detection, GroundTruth};
use crate::synth::SceneSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Anchors keep a detection only when their best class probability is
    /// strictly above this value.
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
    /// IoU needed for a detection to count as a true positive.
    pub eval_iou: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            eval_iou: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou", self.nms_iou),
            ("eval_iou", self.eval_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Threshold, decode, clip, class-wise NMS, truncate.
pub fn postprocess(
    output: &ExpertOutput,
    anchors: &AnchorSet,
    image_size: [usize; 2],
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let probs = &output.cls_probs;
    if probs.shape()[0] != anchors.len() || output.reg_offsets.shape() != [anchors.len(), 4] {
        return Err(Error::Dimension {
            op: "postprocess",
            lhs: probs.shape().to_vec(),
            rhs: vec![anchors.len()],
        });
    }
    let [h, w] = image_size;
    let mut candidates = Vec::new();
    for (a, anchor) in anchors.boxes.iter().enumerate() {
        let row = probs.row(a);
        let (class_id, &score) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |best, (c, p)| if *p > *best.1 { (c, p) } else { best });
        if score <= config.score_threshold {
            continue;
        }
        let off: [f32; 4] = output.reg_offsets.row(a).try_into().expect("four offsets");
        let bbox = decode_box(anchor, &off)?.clip(w as f32, h as f32);
        if bbox.is_valid() && bbox.area() > 0.0 {
            candidates.push(Detection { bbox, class_id, score });
        }
    }
    let mut kept = nms(&candidates, config.nms_iou, true);
    kept.truncate(config.max_detections);
    Ok(kept)
}

pub fn infer(ensemble: &Ensemble, image: &Tensor, config: &InferenceConfig) -> Result<Vec<Detection>> {
    let fused = ensemble.fused_output(image)?;
    postprocess(&fused, ensemble.anchors(), ensemble.image_size(), config)
}

pub fn infer_dataset(ensemble: &Ensemble, data: &[SceneSample], config: &InferenceConfig) -> Result<Vec<Vec<Detection>>> {
    data.iter().map(|s| infer(ensemble, &s.image, config)).collect()
}

/// Detections from cached expert outputs `[sample][expert]` with per-sample
/// gate weights.
pub fn infer_cached(
    cache: &[Vec<ExpertOutput>],
    weights: &[Vec<f32>],
    anchors: &AnchorSet,
    image_size: [usize; 2],
    config: &InferenceConfig,
) -> Result<Vec<Vec<Detection>>> {
    cache
        .iter()
        .zip(weights)
        .map(|(outs, w)| {
            let fused = fuse(w, &outs.iter().collect::<Vec<_>>())?;
            postprocess(&fused, anchors, image_size, config)
        })
        .collect()
}

pub fn ground_truth(data: &[SceneSample]) -> Vec<Vec<GroundTruth>> {
    data.iter().map(|s| s.ground_truth.clone()).collect()
}

pub fn evaluate(ensemble: &Ensemble, data: &[SceneSample], config: &InferenceConfig) -> Result<MapSummary> {
    let dets = infer_dataset(ensemble, data, config)?;
    let classes = ensemble.experts[0].num_classes();
    Ok(mean_average_precision(&dets, &ground_truth(data), classes, config.eval_iou))
}
