//! Single-stage anchor detector: a small convolutional backbone feeding a
//! classification head and a box-regression head on one feature map.

pub(crate) mod train;

pub use train::{
    detection_loss, detection_loss_value, fine_tune, stack_matches, train_expert, LossParts, LossVars,
    TrainConfig,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, EXPERT_MAGIC, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, AnchorConfig, AnchorSet};
use crate::synth::CHANNELS;
use crate::tensor::{Graph, Parameter, Tensor, Var};

/// Prior foreground probability used to initialise the classification bias.
pub const CLS_PRIOR: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorArch {
    /// `[height, width]` of input images.
    pub image_size: [usize; 2],
    /// Output channels of each 3x3 conv block.
    pub channels: Vec<usize>,
    /// Whether a 2x2 max-pool follows each block.
    pub pool: Vec<bool>,
    pub anchor_scales: Vec<f32>,
    pub anchor_ratios: Vec<f32>,
    pub num_classes: usize,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            image_size: [32, 32],
            channels: vec![8, 16, 16],
            pool: vec![true, true, false],
            anchor_scales: vec![8.0, 13.0],
            anchor_ratios: vec![0.7, 1.4],
            num_classes: 1,
        }
    }
}

impl DetectorArch {
    pub fn stride(&self) -> usize {
        1 << self.pool.iter().filter(|&&p| p).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("detector.channels", "need at least one non-empty block"));
        }
        if self.pool.len() != self.channels.len() {
            return Err(Error::config("detector.pool", "needs one entry per conv block"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("detector.num_classes", "must be positive"));
        }
        let s = self.stride();
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::config(
                "detector.image_size",
                format!("{h}x{w} is not a positive multiple of the stride {s}"),
            ));
        }
        self.anchor_config().validate()
    }

    pub fn anchor_config(&self) -> AnchorConfig {
        let s = self.stride();
        AnchorConfig {
            grid_h: self.image_size[0] / s,
            grid_w: self.image_size[1] / s,
            stride: s as f32,
            scales: self.anchor_scales.clone(),
            ratios: self.anchor_ratios.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertMeta {
    pub format_version: u32,
    /// Source domain the expert was trained on.
    pub expert_id: String,
    /// Expert this one was fine-tuned from.
    pub parent_id: Option<String>,
    pub seed: u64,
    pub arch: DetectorArch,
    pub anchors: AnchorConfig,
    pub train_config: TrainConfig,
    /// Resolved run configuration, when written by the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Per-anchor post-sigmoid class probabilities `[A, C]` and box offsets
/// `[A, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertOutput {
    pub cls_probs: Tensor,
    pub reg_offsets: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub(crate) w: Parameter,
    pub(crate) b: Parameter,
}

impl ConvLayer {
    pub(crate) fn new<R: rand::Rng>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            w: Parameter::he_uniform(format!("{name}.w"), &[c_out, c_in, 3, 3], c_in * 9, rng),
            b: Parameter::zeros(format!("{name}.b"), &[c_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertModel {
    pub meta: ExpertMeta,
    backbone: Vec<ConvLayer>,
    cls: ConvLayer,
    reg: ConvLayer,
    anchors: AnchorSet,
}

/// Graph handles for one forward pass.
pub struct HeadVars {
    /// `[N * A, C]` probabilities.
    pub cls: Var,
    /// `[N * A, 4]` offsets.
    pub reg: Var,
}

impl ExpertModel {
    pub fn new<R: rand::Rng>(expert_id: &str, arch: &DetectorArch, train_config: &TrainConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut backbone = Vec::with_capacity(arch.channels.len());
        let mut c_in = CHANNELS;
        for (i, &c) in arch.channels.iter().enumerate() {
            backbone.push(ConvLayer::new(&format!("conv{i}"), c_in, c, rng));
            c_in = c;
        }
        let anchor_config = arch.anchor_config();
        let na = anchor_config.per_location();
        let head = |name: &str, width: usize, rng: &mut R| ConvLayer {
            w: Parameter::new(
                format!("{name}.w"),
                Tensor::uniform(&[na * width, c_in, 3, 3], 0.01, rng),
            ),
            b: Parameter::zeros(format!("{name}.b"), &[na * width]),
        };
        let mut cls = head("cls", arch.num_classes, rng);
        cls.b.value.fill(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        let reg = head("reg", 4, rng);
        Ok(Self {
            meta: ExpertMeta {
                format_version: FORMAT_VERSION,
                expert_id: expert_id.into(),
                parent_id: None,
                seed: train_config.seed,
                arch: arch.clone(),
                anchors: anchor_config.clone(),
                train_config: train_config.clone(),
                config: None,
            },
            backbone,
            cls,
            reg,
            anchors: generate_anchors(&anchor_config)?,
        })
    }

    pub fn id(&self) -> &str {
        &self.meta.expert_id
    }

    pub fn arch(&self) -> &DetectorArch {
        &self.meta.arch
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn num_classes(&self) -> usize {
        self.meta.arch.num_classes
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in self.backbone.iter().chain([&self.cls, &self.reg]) {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in self.backbone.iter_mut().chain([&mut self.cls, &mut self.reg]) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Adds every parameter to `g`, in [`ExpertModel::params`] order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| if trainable { g.param(p) } else { g.frozen(p) })
            .collect()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let [h, w] = self.meta.arch.image_size;
        [CHANNELS, h, w]
    }

    /// Forward pass on an `[N, 3, H, W]` batch with parameters bound by
    /// [`ExpertModel::bind`].
    pub fn forward_graph(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<HeadVars> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape() {
            return Err(Error::Dimension {
                op: "expert_forward",
                lhs: shape,
                rhs: self.input_shape().to_vec(),
            });
        }
        let mut h = x;
        for (i, &pool) in self.meta.arch.pool.iter().enumerate() {
            h = g.conv2d(h, vars[2 * i], vars[2 * i + 1], 1, 1)?;
            h = g.relu(h);
            if pool {
                h = g.max_pool2d(h, 2, 2)?;
            }
        }
        let k = 2 * self.backbone.len();
        let na = self.meta.anchors.per_location();
        let c = self.num_classes();
        let logits = g.conv2d(h, vars[k], vars[k + 1], 1, 1)?;
        let logits = g.anchor_rows(logits, na, c)?;
        let cls = g.sigmoid(logits);
        let reg = g.conv2d(h, vars[k + 2], vars[k + 3], 1, 1)?;
        let reg = g.anchor_rows(reg, na, 4)?;
        Ok(HeadVars { cls, reg })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(EXPERT_MAGIC, FORMAT_VERSION, &self.meta, &self.params())
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (meta, stored): (ExpertMeta, _) = container::decode(path, EXPERT_MAGIC, bytes)?;
        meta.arch
            .validate()
            .map_err(|e| Error::format(path, format!("architecture: {e}")))?;
        if meta.anchors != meta.arch.anchor_config() {
            return Err(Error::format(path, "anchor config disagrees with the architecture"));
        }
        let mut rng = crate::rng::stream_rng(0, "load", 0);
        let mut model = Self::new(&meta.expert_id, &meta.arch, &meta.train_config, &mut rng)?;
        container::assign(path, stored, &mut model.params_mut())?;
        model.meta = meta;
        Ok(model)
    }
}

/// Runs `model` on one `[3, H, W]` (or `[1, 3, H, W]`) image.
pub fn expert_forward(model: &ExpertModel, image: &Tensor) -> Result<ExpertOutput> {
    let mut g = Graph::new();
    let batch = as_batch(image)?;
    let x = g.constant(batch);
    let vars = model.bind(&mut g, false);
    let out = model.forward_graph(&mut g, x, &vars)?;
    Ok(ExpertOutput {
        cls_probs: g.value(out.cls).clone(),
        reg_offsets: g.value(out.reg).clone(),
    })
}

pub(crate) fn as_batch(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    match s.len() {
        3 => image.clone().reshape(&[1, s[0], s[1], s[2]]),
        4 if s[0] == 1 => Ok(image.clone()),
        _ => Err(Error::Dimension {
            op: "image",
            lhs: s.to_vec(),
            rhs: vec![CHANNELS],
        }),
    }
}

pub fn save_expert(model: &ExpertModel, path: &Path) -> Result<()> {
    container::write_file(path, &model.to_bytes())
}

pub fn load_expert(path: &Path) -> Result<ExpertModel> {
    ExpertModel::from_bytes(path, &container::read_file(path)?)
}

/// All experts of one ensemble must share input size, anchors and classes.
pub fn check_compatible(experts: &[&ExpertModel]) -> Result<()> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Validation("an ensemble needs at least one expert".into()))?;
    for (i, e) in experts.iter().enumerate().skip(1) {
        let (a, b) = (&first.meta, &e.meta);
        let reason = if a.arch.image_size != b.arch.image_size {
            "input size"
        } else if a.anchors != b.anchors {
            "anchor config"
        } else if a.arch.num_classes != b.arch.num_classes {
            "class count"
        } else {
            continue;
        };
        return Err(Error::Validation(format!(
            "expert {i} (`{}`) differs from expert 0 (`{}`) in {reason}",
            b.expert_id, a.expert_id
        )));
    }
    Ok(())
}
