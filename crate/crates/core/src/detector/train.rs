use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ExpertModel, ExpertOutput};
use crate::error::{Error, Result};
use crate::geometry::{match_anchors, AnchorMatch, AnchorSet};
use crate::rng::stream_rng;
use crate::synth::SceneSample;
use crate::tensor::{Graph, Sgd, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    /// Anchors at or above this IoU with a ground truth are positive.
    pub pos_iou: f32,
    /// Anchors below this IoU with every ground truth are negative.
    pub neg_iou: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            pos_iou: 0.5,
            neg_iou: 0.4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::config("focal_alpha", "must lie in (0, 1)"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal_gamma", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.neg_iou) || !(0.0..=1.0).contains(&self.pos_iou) || self.neg_iou > self.pos_iou {
            return Err(Error::config("pos_iou", "need 0 <= neg_iou <= pos_iou <= 1"));
        }
        Sgd::new(self.learning_rate, self.momentum).map(|_| ())
    }

    pub fn optimizer(&self) -> Result<Sgd> {
        Sgd::new(self.learning_rate, self.momentum)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_reg: f32,
    pub l_cls: f32,
    pub total: f32,
}

pub struct LossVars {
    pub l_reg: Var,
    pub l_cls: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossParts {
        LossParts {
            l_reg: g.value(self.l_reg).data()[0],
            l_cls: g.value(self.l_cls).data()[0],
            total: g.value(self.total).data()[0],
        }
    }
}

/// Joint loss `L = l_reg + l_cls`: smooth L1 over positive anchors and focal
/// loss over non-ignored anchors, both divided by `max(1, positives)`.
pub fn detection_loss(g: &mut Graph, cls: Var, reg: Var, m: &AnchorMatch, alpha: f32, gamma: f32) -> Result<LossVars> {
    if m.labels.is_empty() {
        return Err(Error::Validation("detection loss over zero anchors".into()));
    }
    let norm = m.num_positive().max(1) as f32;
    let l_cls = g.focal_loss(cls, &m.cls_targets, &m.cls_mask(), alpha, gamma, norm)?;
    let l_reg = g.smooth_l1(reg, &m.reg_targets, &m.reg_mask(), norm)?;
    let total = g.add(l_reg, l_cls)?;
    Ok(LossVars { l_reg, l_cls, total })
}

pub fn detection_loss_value(output: &ExpertOutput, m: &AnchorMatch, alpha: f32, gamma: f32) -> Result<LossParts> {
    let mut g = Graph::new();
    let cls = g.constant(output.cls_probs.clone());
    let reg = g.constant(output.reg_offsets.clone());
    Ok(detection_loss(&mut g, cls, reg, m, alpha, gamma)?.values(&g))
}

/// Concatenates per-image matches in batch order.
pub fn stack_matches(matches: &[&AnchorMatch]) -> Result<AnchorMatch> {
    let first = matches
        .first()
        .ok_or_else(|| Error::Contract("cannot stack zero matches".into()))?;
    let mut labels = Vec::new();
    let mut gt_index = Vec::new();
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    for m in matches {
        labels.extend_from_slice(&m.labels);
        gt_index.extend_from_slice(&m.gt_index);
        cls.push(&m.cls_targets);
        reg.push(&m.reg_targets);
    }
    let flat = |parts: Vec<&Tensor>, width: usize| -> Result<Tensor> {
        let data: Vec<f32> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![data.len() / width.max(1), width], data)
    };
    let c = first.cls_targets.shape()[1];
    Ok(AnchorMatch {
        labels,
        gt_index,
        reg_targets: flat(reg, 4)?,
        cls_targets: flat(cls, c)?,
    })
}

pub(crate) fn match_dataset(
    anchors: &AnchorSet,
    data: &[SceneSample],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<Vec<AnchorMatch>> {
    data.iter()
        .map(|s| match_anchors(anchors, &s.ground_truth, num_classes, config.pos_iou, config.neg_iou))
        .collect()
}

pub(crate) fn check_images(data: &[SceneSample], shape: [usize; 3]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("training needs at least one sample".into()));
    }
    for s in data {
        if s.image.shape() != shape {
            return Err(Error::Dimension {
                op: "training image",
                lhs: s.image.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
    }
    Ok(())
}

/// Shuffled minibatches of sample indices for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, stream: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, stream, epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    let avg = |f: fn(&LossParts) -> f32| (parts.iter().map(|p| f(p) as f64).sum::<f64>() / n) as f32;
    LossParts {
        l_reg: avg(|p| p.l_reg),
        l_cls: avg(|p| p.l_cls),
        total: avg(|p| p.total),
    }
}

pub(crate) fn divergence(err: Error, epoch: usize, curve: &[LossParts]) -> Error {
    match err {
        Error::Divergence(msg) => Error::Divergence(format!(
            "{msg} in epoch {epoch}; last finite epoch loss {}",
            curve.last().map_or("none".to_string(), |p| p.total.to_string())
        )),
        other => other,
    }
}

fn run_training(model: &mut ExpertModel, data: &[SceneSample], config: &TrainConfig) -> Result<Vec<LossParts>> {
    config.validate()?;
    check_images(data, model.input_shape())?;
    let matches = match_dataset(model.anchors(), data, model.num_classes(), config)?;
    let mut opt = config.optimizer()?;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut parts = Vec::new();
        for batch in epoch_batches(data.len(), config.batch_size, config.seed, "expert-shuffle", epoch) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &data[i].image).collect();
            let m = stack_matches(&batch.iter().map(|&i| &matches[i]).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(&images)?);
            let vars = model.bind(&mut g, true);
            let heads = model.forward_graph(&mut g, x, &vars)?;
            let loss = detection_loss(&mut g, heads.cls, heads.reg, &m, config.focal_alpha, config.focal_gamma)?;
            let grads = g.backward(loss.total).map_err(|e| divergence(e, epoch, &curve))?;
            let mut params = model.params_mut();
            for (p, &v) in params.iter_mut().zip(&vars) {
                p.zero_grad();
                grads.accumulate_into(v, p)?;
            }
            opt.step(&mut params).map_err(|e| divergence(e, epoch, &curve))?;
            parts.push(loss.values(&g));
        }
        curve.push(mean_parts(&parts));
    }
    Ok(curve)
}

/// Trains a fresh expert; returns the model and its per-epoch mean losses.
pub fn train_expert(
    expert_id: &str,
    data: &[SceneSample],
    arch: &super::DetectorArch,
    config: &TrainConfig,
) -> Result<(ExpertModel, Vec<LossParts>)> {
    config.validate()?;
    let mut model = ExpertModel::new(expert_id, arch, config, &mut stream_rng(config.seed, "expert-init", 0))?;
    let curve = run_training(&mut model, data, config)?;
    Ok((model, curve))
}

/// Continues training every layer of `model` on `few_shot`. With zero epochs
/// the input model is returned unchanged.
pub fn fine_tune(model: &ExpertModel, few_shot: &[SceneSample], config: &TrainConfig) -> Result<(ExpertModel, Vec<LossParts>)> {
    if config.epochs == 0 {
        config.validate()?;
        check_images(few_shot, model.input_shape())?;
        return Ok((model.clone(), Vec::new()));
    }
    let mut tuned = model.clone();
    tuned.meta.parent_id = Some(model.meta.expert_id.clone());
    tuned.meta.expert_id = format!("{}-ft", model.meta.expert_id);
    tuned.meta.seed = config.seed;
    tuned.meta.train_config = config.clone();
    let curve = run_training(&mut tuned, few_shot, config)?;
    Ok((tuned, curve))
}
