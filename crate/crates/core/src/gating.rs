//! Per-image softmax gate over frozen experts, gate-weighted fusion of their
//! outputs, gate training, and top-k expert selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, FORMAT_VERSION, GATING_MAGIC};
use crate::detector::{
    as_batch, check_compatible, detection_loss, expert_forward, ConvLayer, ExpertModel, ExpertOutput, LossParts,
    TrainConfig,
};
use crate::detector::train::{check_images, divergence, epoch_batches, match_dataset, mean_parts};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::synth::{SceneSample, CHANNELS};
use crate::tensor::{weighted_sum_slices, Graph, Parameter, Tensor, Var};

/// Fused classification and regression outputs have the expert layout.
pub type FusedOutput = ExpertOutput;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateArch {
    /// Output channels of each conv block; every block ends in a 2x2 pool.
    pub channels: Vec<usize>,
}

impl Default for GateArch {
    fn default() -> Self {
        Self {
            channels: vec![8, 8, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingMeta {
    pub format_version: u32,
    /// Gate output `i` weights the expert with id `expert_ids[i]`.
    pub expert_ids: Vec<String>,
    pub seed: u64,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub arch: GateArch,
    pub train_config: TrainConfig,
    /// Resolved run configuration, when written by the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingModel {
    pub meta: GatingMeta,
    convs: Vec<ConvLayer>,
    out_w: Parameter,
    out_b: Parameter,
}

impl GatingModel {
    /// The output layer starts at zero, so an untrained gate is uniform.
    pub fn new<R: rand::Rng>(
        expert_ids: Vec<String>,
        image_size: [usize; 2],
        arch: &GateArch,
        train_config: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if expert_ids.is_empty() {
            return Err(Error::Validation("a gate needs at least one expert".into()));
        }
        if arch.channels.is_empty() || arch.channels.contains(&0) {
            return Err(Error::config("gate.channels", "need at least one non-empty block"));
        }
        let reach = 1usize << arch.channels.len();
        if image_size[0] < reach || image_size[1] < reach {
            return Err(Error::config(
                "gate.channels",
                format!("{} pooling blocks do not fit a {}x{} image", arch.channels.len(), image_size[0], image_size[1]),
            ));
        }
        let mut convs = Vec::new();
        let mut c_in = CHANNELS;
        for (i, &c) in arch.channels.iter().enumerate() {
            convs.push(ConvLayer::new(&format!("gate.conv{i}"), c_in, c, rng));
            c_in = c;
        }
        let n = expert_ids.len();
        Ok(Self {
            meta: GatingMeta {
                format_version: FORMAT_VERSION,
                expert_ids,
                seed: train_config.seed,
                image_size,
                arch: arch.clone(),
                train_config: train_config.clone(),
                config: None,
            },
            convs,
            out_w: Parameter::zeros("gate.out.w", &[c_in, n]),
            out_b: Parameter::zeros("gate.out.b", &[n]),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.meta.expert_ids.len()
    }

    pub fn expert_ids(&self) -> &[String] {
        &self.meta.expert_ids
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.convs {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.convs {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    /// Zeroes the output layer, making every gate logit equal.
    pub fn zero_output_layer(&mut self) {
        self.out_w.value.fill(0.0);
        self.out_b.value.fill(0.0);
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| if trainable { g.param(p) } else { g.frozen(p) })
            .collect()
    }

    /// `[N, 3, H, W] -> [N, n]` softmax weights.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<Var> {
        let [h, w] = self.meta.image_size;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [CHANNELS, h, w] {
            return Err(Error::Dimension {
                op: "compute_gate",
                lhs: shape,
                rhs: vec![CHANNELS, h, w],
            });
        }
        let mut y = x;
        for i in 0..self.convs.len() {
            y = g.conv2d(y, vars[2 * i], vars[2 * i + 1], 1, 1)?;
            y = g.relu(y);
            y = g.max_pool2d(y, 2, 2)?;
        }
        let y = g.global_avg_pool(y)?;
        let k = 2 * self.convs.len();
        let logits = g.dense(y, vars[k], vars[k + 1])?;
        g.softmax(logits, 1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(GATING_MAGIC, FORMAT_VERSION, &self.meta, &self.params())
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (meta, stored): (GatingMeta, _) = container::decode(path, GATING_MAGIC, bytes)?;
        let mut rng = stream_rng(0, "load", 0);
        let mut model = Self::new(meta.expert_ids.clone(), meta.image_size, &meta.arch, &meta.train_config, &mut rng)
            .map_err(|e| Error::format(path, format!("architecture: {e}")))?;
        container::assign(path, stored, &mut model.params_mut())?;
        model.meta = meta;
        Ok(model)
    }
}

/// `softmax(R(x))` for one image.
pub fn compute_gate(gate: &GatingModel, image: &Tensor) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let x = g.constant(as_batch(image)?);
    let vars = gate.bind(&mut g, false);
    let w = gate.forward_graph(&mut g, x, &vars)?;
    Ok(g.value(w).data().to_vec())
}

/// `1/n` for every expert; equal to the softmax of equal logits.
pub fn uniform_weights(n: usize) -> Vec<f32> {
    vec![(1.0f64 / n as f64) as f32; n]
}

/// `Σ_i gate[i] · outputs[i]` for both heads, summed in ascending expert order.
pub fn fuse(gate: &[f32], outputs: &[&ExpertOutput]) -> Result<FusedOutput> {
    if gate.len() != outputs.len() || outputs.is_empty() {
        return Err(Error::Validation(format!(
            "{} gate weights for {} expert outputs",
            gate.len(),
            outputs.len()
        )));
    }
    let first = outputs[0];
    for (i, o) in outputs.iter().enumerate().skip(1) {
        if o.cls_probs.shape() != first.cls_probs.shape() || o.reg_offsets.shape() != first.reg_offsets.shape() {
            return Err(Error::Validation(format!(
                "expert output {i} has shapes {:?}/{:?}, expected {:?}/{:?}",
                o.cls_probs.shape(),
                o.reg_offsets.shape(),
                first.cls_probs.shape(),
                first.reg_offsets.shape()
            )));
        }
    }
    let cls: Vec<&[f32]> = outputs.iter().map(|o| o.cls_probs.data()).collect();
    let reg: Vec<&[f32]> = outputs.iter().map(|o| o.reg_offsets.data()).collect();
    Ok(FusedOutput {
        cls_probs: Tensor::new(first.cls_probs.shape().to_vec(), weighted_sum_slices(gate, &cls))?,
        reg_offsets: Tensor::new(first.reg_offsets.shape().to_vec(), weighted_sum_slices(gate, &reg))?,
    })
}

/// Expert outputs for every sample, indexed `[sample][expert]`.
pub fn cache_outputs(experts: &[&ExpertModel], data: &[SceneSample]) -> Result<Vec<Vec<ExpertOutput>>> {
    data.iter()
        .map(|s| experts.iter().map(|e| expert_forward(e, &s.image)).collect())
        .collect()
}

fn ids(experts: &[&ExpertModel]) -> Vec<String> {
    experts.iter().map(|e| e.meta.expert_id.clone()).collect()
}

/// Trains only the gate; experts enter the graph as constants through a
/// cache filled once up front. The loss of a minibatch is the mean of the
/// per-image joint losses on the fused outputs.
fn train_on_cache(
    gate: &mut GatingModel,
    cache: &[Vec<ExpertOutput>],
    data: &[SceneSample],
    matches: &[crate::geometry::AnchorMatch],
    config: &TrainConfig,
) -> Result<Vec<LossParts>> {
    let mut opt = config.optimizer()?;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut parts = Vec::new();
        for batch in epoch_batches(data.len(), config.batch_size, config.seed, "gate-shuffle", epoch) {
            let mut g = Graph::new();
            let vars = gate.bind(&mut g, true);
            let mut totals = Vec::with_capacity(batch.len());
            let mut batch_parts = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = g.constant(data[i].batch());
                let w = gate.forward_graph(&mut g, x, &vars)?;
                let cls: Vec<Var> = cache[i].iter().map(|o| g.constant(o.cls_probs.clone())).collect();
                let reg: Vec<Var> = cache[i].iter().map(|o| g.constant(o.reg_offsets.clone())).collect();
                let y_cls = g.weighted_sum(w, &cls)?;
                let y_reg = g.weighted_sum(w, &reg)?;
                let loss = detection_loss(&mut g, y_cls, y_reg, &matches[i], config.focal_alpha, config.focal_gamma)?;
                batch_parts.push(loss.values(&g));
                totals.push(loss.total);
            }
            let mut total = totals[0];
            for &t in &totals[1..] {
                total = g.add(total, t)?;
            }
            let total = g.scale(total, 1.0 / batch.len() as f32);
            let grads = g.backward(total).map_err(|e| divergence(e, epoch, &curve))?;
            let mut params = gate.params_mut();
            for (p, &v) in params.iter_mut().zip(&vars) {
                p.zero_grad();
                grads.accumulate_into(v, p)?;
            }
            opt.step(&mut params).map_err(|e| divergence(e, epoch, &curve))?;
            parts.push(mean_parts(&batch_parts));
        }
        curve.push(mean_parts(&parts));
    }
    Ok(curve)
}

struct Prepared {
    cache: Vec<Vec<ExpertOutput>>,
    matches: Vec<crate::geometry::AnchorMatch>,
}

fn prepare(experts: &[&ExpertModel], data: &[SceneSample], config: &TrainConfig) -> Result<Prepared> {
    config.validate()?;
    check_compatible(experts)?;
    check_images(data, experts[0].input_shape())?;
    let matches = match_dataset(experts[0].anchors(), data, experts[0].num_classes(), config)?;
    Ok(Prepared {
        cache: cache_outputs(experts, data)?,
        matches,
    })
}

fn fresh_gate(experts: &[&ExpertModel], arch: &GateArch, config: &TrainConfig, stage: u64) -> Result<GatingModel> {
    GatingModel::new(
        ids(experts),
        experts[0].meta.arch.image_size,
        arch,
        config,
        &mut stream_rng(config.seed, "gate-init", stage),
    )
}

pub fn train_gating(
    experts: &[&ExpertModel],
    data: &[SceneSample],
    arch: &GateArch,
    config: &TrainConfig,
) -> Result<(GatingModel, Vec<LossParts>)> {
    let prep = prepare(experts, data, config)?;
    let mut gate = fresh_gate(experts, arch, config, 0)?;
    let curve = train_on_cache(&mut gate, &prep.cache, data, &prep.matches, config)?;
    Ok((gate, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRank {
    /// Gate output index.
    pub index: usize,
    pub expert_id: String,
    pub mean_weight: f64,
}

impl WeightRank {
    pub fn percent(&self) -> f64 {
        self.mean_weight * 100.0
    }
}

/// Mean gate weight per expert over `data`, sorted descending with ties to
/// the lower index.
pub fn mean_gate_weights(gate: &GatingModel, data: &[SceneSample]) -> Result<Vec<WeightRank>> {
    if data.is_empty() {
        return Err(Error::Validation("mean gate weights need at least one sample".into()));
    }
    let n = gate.num_experts();
    let mut sums = vec![0f64; n];
    for s in data {
        for (acc, w) in sums.iter_mut().zip(compute_gate(gate, &s.image)?) {
            *acc += w as f64;
        }
    }
    Ok(rank_weights(
        gate.expert_ids(),
        &sums.iter().map(|s| s / data.len() as f64).collect::<Vec<_>>(),
    ))
}

pub fn rank_weights(ids: &[String], means: &[f64]) -> Vec<WeightRank> {
    let mut out: Vec<WeightRank> = ids
        .iter()
        .zip(means)
        .enumerate()
        .map(|(index, (id, &mean_weight))| WeightRank {
            index,
            expert_id: id.clone(),
            mean_weight,
        })
        .collect();
    out.sort_by(|a, b| b.mean_weight.total_cmp(&a.mean_weight).then(a.index.cmp(&b.index)));
    out
}

/// Gate indices of the `k` best-ranked experts, in ascending index order.
pub fn select_top_k(ranking: &[WeightRank], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > ranking.len() {
        return Err(Error::config("k", format!("must lie in 1..={}, got {k}", ranking.len())));
    }
    let mut chosen: Vec<usize> = ranking[..k].iter().map(|r| r.index).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Clone, Debug)]
pub struct TopKOutcome {
    /// Gate over every expert and its training curve.
    pub full_gate: GatingModel,
    pub full_curve: Vec<LossParts>,
    pub ranking: Vec<WeightRank>,
    /// Indices into the full expert list.
    pub selected: Vec<usize>,
    /// Fresh gate retrained over the selected experts only.
    pub gate: GatingModel,
    pub curve: Vec<LossParts>,
}

/// Train on all experts, rank by mean weight, keep `k`, retrain a fresh gate
/// on the subset. `manual` replaces the automatic selection.
pub fn retrain_top_k(
    experts: &[&ExpertModel],
    data: &[SceneSample],
    k: usize,
    manual: Option<&[usize]>,
    arch: &GateArch,
    config: &TrainConfig,
) -> Result<TopKOutcome> {
    let prep = prepare(experts, data, config)?;
    let mut full_gate = fresh_gate(experts, arch, config, 0)?;
    let full_curve = train_on_cache(&mut full_gate, &prep.cache, data, &prep.matches, config)?;
    let ranking = mean_gate_weights(&full_gate, data)?;
    let selected = match manual {
        Some(ids) => {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            ids.dedup();
            if ids.is_empty() || ids.iter().any(|&i| i >= experts.len()) {
                return Err(Error::config("manual_ids", format!("indices must lie in 0..{}", experts.len())));
            }
            ids
        }
        None => select_top_k(&ranking, k)?,
    };
    let subset: Vec<&ExpertModel> = selected.iter().map(|&i| experts[i]).collect();
    let cache: Vec<Vec<ExpertOutput>> = prep
        .cache
        .iter()
        .map(|row| selected.iter().map(|&i| row[i].clone()).collect())
        .collect();
    let mut gate = fresh_gate(&subset, arch, config, 1)?;
    let curve = train_on_cache(&mut gate, &cache, data, &prep.matches, config)?;
    Ok(TopKOutcome {
        full_gate,
        full_curve,
        ranking,
        selected,
        gate,
        curve,
    })
}

pub fn save_gating(gate: &GatingModel, path: &Path) -> Result<()> {
    container::write_file(path, &gate.to_bytes())
}

pub fn load_gating(path: &Path) -> Result<GatingModel> {
    GatingModel::from_bytes(path, &container::read_file(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    Trained(GatingModel),
    /// Constant `1/n` weights.
    Uniform,
}

/// Ordered frozen experts with the gate that weights them.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub experts: Vec<ExpertModel>,
    pub gate: Gate,
}

impl Ensemble {
    /// Checks expert compatibility and that gate output `i` is bound to
    /// expert `i`.
    pub fn new(experts: Vec<ExpertModel>, gate: GatingModel) -> Result<Self> {
        check_compatible(&experts.iter().collect::<Vec<_>>())?;
        let found: Vec<&str> = experts.iter().map(|e| e.meta.expert_id.as_str()).collect();
        if gate.expert_ids() != found.as_slice() {
            return Err(Error::Validation(format!(
                "gate expects experts {:?} in that order, got {:?}",
                gate.expert_ids(),
                found
            )));
        }
        if gate.meta.image_size != experts[0].meta.arch.image_size {
            return Err(Error::Validation("gate and experts disagree on input size".into()));
        }
        Ok(Self {
            experts,
            gate: Gate::Trained(gate),
        })
    }

    pub fn uniform(experts: Vec<ExpertModel>) -> Result<Self> {
        check_compatible(&experts.iter().collect::<Vec<_>>())?;
        Ok(Self {
            experts,
            gate: Gate::Uniform,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn anchors(&self) -> &crate::geometry::AnchorSet {
        self.experts[0].anchors()
    }

    pub fn image_size(&self) -> [usize; 2] {
        self.experts[0].meta.arch.image_size
    }

    pub fn gate_weights(&self, image: &Tensor) -> Result<Vec<f32>> {
        match &self.gate {
            Gate::Trained(g) => compute_gate(g, image),
            Gate::Uniform => Ok(uniform_weights(self.experts.len())),
        }
    }

    pub fn expert_outputs(&self, image: &Tensor) -> Result<Vec<ExpertOutput>> {
        self.experts.iter().map(|e| expert_forward(e, image)).collect()
    }

    pub fn fused_output(&self, image: &Tensor) -> Result<FusedOutput> {
        let w = self.gate_weights(image)?;
        let outs = self.expert_outputs(image)?;
        fuse(&w, &outs.iter().collect::<Vec<_>>())
    }
}

pub fn uniform_ensemble(experts: Vec<ExpertModel>) -> Result<Ensemble> {
    Ensemble::uniform(experts)
}
