//! Finite-difference cases shared by the gradient suite and the acceptance run.

use gatefuse::detector::{detection_loss, expert_forward, DetectorArch, ExpertModel, TrainConfig};
use gatefuse::gating::{GateArch, GatingModel};
use gatefuse::geometry::{match_anchors, AnchorLabel, AnchorMatch, BBox, GroundTruth};
use gatefuse::tensor::{Graph, Tensor, Var};

use super::*;

pub type Case = (String, GradReport);

fn grad(name: &str, inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> Case {
    grad_projected(name, inputs, None, build)
}

fn grad_projected(
    name: &str,
    inputs: &[Tensor],
    projection: Option<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> Case {
    (name.to_string(), check_gradients_projected(inputs, projection, build))
}

/// Every case: each differentiable op, then the two composite losses.
pub fn all() -> Vec<Case> {
    [
        conv2d_gradient,
        dense_gradient,
        elementwise_gradients,
        pooling_and_reshape_gradients,
        softmax_gradient,
        weighted_sum_gradient,
        loss_op_gradients,
        fan_out_accumulates,
        composite_network_gradient,
        detection_loss_gradient,
        gating_loss_gradient,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}

pub fn assert_cases(cases: &[Case]) {
    for (name, report) in cases {
        assert!(report.checked > 0, "{name}: nothing checked");
        assert!(
            report.max_rel_err < FD_TOL,
            "{name}: max relative error {:.3e} over {} elements, worst {:?}",
            report.max_rel_err,
            report.checked,
            report.worst
        );
    }
}

pub fn conv2d_gradient() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let x = random_tensor(&[1, 2, 8, 8], -1.0, 1.0, &mut r);
    let w = random_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = random_tensor(&[3], -0.5, 0.5, &mut r);
    out.push(grad("conv2d", &[x.clone(), w.clone(), b.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        y
    }));
    let xp = random_tensor(&[1, 2, 8, 8], 0.2, 1.0, &mut r);
    let wp = random_tensor(&[3, 2, 3, 3], 0.1, 0.5, &mut r);
    out.push(grad("conv2d strided", &[xp, wp, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 0).unwrap();
        y
    }));
    out
}

pub fn dense_gradient() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(2);
    let x = random_tensor(&[3, 5], -1.0, 1.0, &mut r);
    let w = random_tensor(&[5, 4], -1.0, 1.0, &mut r);
    let b = random_tensor(&[4], -1.0, 1.0, &mut r);
    out.push(grad("dense", &[x, w, b], |g, v| {
        let y = g.dense(v[0], v[1], v[2]).unwrap();
        y
    }));
    out
}

pub fn elementwise_gradients() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(3);
    let a = kink_free_tensor(&[2, 3, 4], &mut r);
    let b = random_tensor(&[2, 3, 4], -1.0, 1.0, &mut r);
    out.push(grad("relu", &[a.clone()], |g, v| {
        let y = g.relu(v[0]);
        y
    }));
    out.push(grad("sigmoid", &[b.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        y
    }));
    out.push(grad("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        y
    }));
    out.push(grad("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        y
    }));
    out.push(grad("scale", &[b.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        y
    }));
    out.push(grad("mean", &[b.clone()], |g, v| {
        let s = g.sigmoid(v[0]);
        g.mean(s)
    }));
    out.push(grad("sum", &[b], |g, v| {
        let s = g.sigmoid(v[0]);
        g.sum(s)
    }));
    out
}

pub fn pooling_and_reshape_gradients() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(4);
    // distinct values spaced wider than the finite-difference step
    let mut vals: Vec<f32> = (0..2 * 2 * 6 * 6).map(|i| i as f32 * 0.05).collect();
    for i in (1..vals.len()).rev() {
                let j = r.gen_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(vec![2, 2, 6, 6], vals).unwrap();
    out.push(grad("max_pool2d", &[x.clone()], |g, v| {
        let y = g.max_pool2d(v[0], 2, 2).unwrap();
        y
    }));
    out.push(grad("flatten", &[x.clone()], |g, v| {
        let y = g.flatten(v[0]).unwrap();
        y
    }));
    out.push(grad("global_avg_pool", &[x.clone()], |g, v| {
        let y = g.global_avg_pool(v[0]).unwrap();
        y
    }));
    let head = random_tensor(&[1, 6, 3, 2], -1.0, 1.0, &mut r);
    out.push(grad("anchor_rows", &[head], |g, v| {
        let y = g.anchor_rows(v[0], 2, 3).unwrap();
        y
    }));
    out
}

pub fn softmax_gradient() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(5);
    let x = random_tensor(&[3, 4], -0.5, 0.5, &mut r);
    for axis in 0..2 {
        out.push(grad_projected("softmax", &[x.clone()], Some(last_entry_projection(3, 4)), |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            y
        }));
    }
    out
}

pub fn weighted_sum_gradient() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(6);
    let gate = random_tensor(&[3], 0.1, 1.0, &mut r);
    let e: Vec<Tensor> = (0..3).map(|_| random_tensor(&[5, 2], 0.0, 1.0, &mut r)).collect();
    let mut inputs = vec![gate];
    inputs.extend(e);
    out.push(grad("weighted_sum", &inputs, |g, v| {
        let y = g.weighted_sum(v[0], &v[1..]).unwrap();
        y
    }));
    out
}

pub fn loss_op_gradients() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(7);
    let probs = random_tensor(&[6, 2], 0.2, 0.8, &mut r);
    let targets = Tensor::new(
        vec![6, 2],
        vec![1., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0.],
    )
    .unwrap();
    let mask = [true, true, false, true, true, true];
    for gamma in [0.0, 0.5, 2.0] {
        out.push(grad("focal", &[probs.clone()], |g, v| {
            g.focal_loss(v[0], &targets, &mask, 0.25, gamma, 3.0).unwrap()
        }));
    }
    // residuals kept away from the |x| = 1 seam
    let target = random_tensor(&[6, 4], -1.0, 1.0, &mut r);
    let mut pred = target.clone();
    for (i, p) in pred.data_mut().iter_mut().enumerate() {
        *p += [0.3, -0.6, 1.8, -2.5][i % 4];
    }
    out.push(grad("smooth_l1", &[pred], |g, v| g.smooth_l1(v[0], &target, &mask, 2.0).unwrap()));
    out
}

pub fn fan_out_accumulates() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(8);
    let x = random_tensor(&[4], -1.0, 1.0, &mut r);
    out.push(grad("fan-out", &[x], |g, v| {
        let s = g.sigmoid(v[0]);
        let twice = g.mul(s, v[0]).unwrap();
        let sum = g.add(twice, s).unwrap();
        sum
    }));
    out
}

pub fn composite_network_gradient() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let mut r = rng(9);
    let x = random_tensor(&[1, 2, 6, 6], -2.0, 2.0, &mut r);
    // pre-activations stay O(1) and positive; ReLU kinks are covered above
    let cw = random_tensor(&[3, 2, 3, 3], -0.1, 0.1, &mut r);
    let cb = random_tensor(&[3], 0.8, 1.2, &mut r);
    let dw = random_tensor(&[3 * 6 * 6, 4], -0.1, 0.1, &mut r);
    let db = random_tensor(&[4], -0.1, 0.1, &mut r);
    let proj = last_entry_projection(1, 4);
    out.push(grad_projected("conv-relu-dense-softmax", &[cw, cb, dw, db], Some(proj), |g, v| {
        let input = g.constant(x.clone());
        let c = g.conv2d(input, v[0], v[1], 1, 1).unwrap();
        let a = g.relu(c);
        let f = g.flatten(a).unwrap();
        let d = g.dense(f, v[2], v[3]).unwrap();
        let s = g.softmax(d, 1).unwrap();
        s
    }));
    out
}

/// Step for central differences on the f64 reference forward pass.
const REF_STEP: f64 = 1e-5;

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn ref_image(image: &Tensor) -> reference::Map {
    let s = image.shape();
    reference::Map {
        c: s[1],
        h: s[2],
        w: s[3],
        v: to_f64(image),
    }
}

fn ref_targets(m: &AnchorMatch) -> reference::Targets {
    let classes = m.cls_targets.shape()[1];
    reference::Targets {
        label: m
            .labels
            .iter()
            .map(|l| match l {
                AnchorLabel::Positive => 1,
                AnchorLabel::Negative => 0,
                AnchorLabel::Ignore => -1,
            })
            .collect(),
        cls: m.cls_targets.data().chunks(classes).map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
        reg: m.reg_targets.data().chunks(4).map(|r| [r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64]).collect(),
    }
}

/// Analytic gradients of `build` with respect to `inputs`, and its value.
fn analytic(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let value = g.value(loss).data()[0] as f64;
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, out)
}

fn check_against_reference(
    name: &str,
    value: f64,
    grads: &[Tensor],
    params: &[Vec<f64>],
    f: impl Fn(&[Vec<f64>]) -> f64,
) -> Case {
    let reference = f(params);
    assert!(
        (value - reference).abs() <= 1e-5 * reference.abs().max(1.0),
        "{name}: library forward {value} disagrees with the reference {reference}"
    );
    let numeric = reference::central_differences(params, REF_STEP, f);
    (name.to_string(), compare_gradients(grads, &numeric))
}

fn toy_expert(size: usize, classes: usize, r: &mut rand_chacha::ChaCha8Rng) -> ExpertModel {
    let arch = DetectorArch {
        image_size: [size, size],
        channels: vec![4, 4],
        pool: vec![true, true],
        num_classes: classes,
        ..DetectorArch::default()
    };
    let mut e = ExpertModel::new("toy", &arch, &TrainConfig::default(), r).unwrap();
    for p in e.params_mut() {
        let t = random_tensor(p.value.shape(), -0.3, 0.3, r);
        p.value = t;
    }
    e
}

fn toy_truth() -> Vec<GroundTruth> {
    vec![
        GroundTruth {
            bbox: BBox::new(1.0, 2.0, 9.0, 12.0),
            class_id: 0,
        },
        GroundTruth {
            bbox: BBox::new(7.0, 5.0, 15.5, 11.0),
            class_id: 1,
        },
    ]
}

/// Joint focal + smooth-L1 loss of a 16x16 detector with a 4x4 anchor grid,
/// with respect to every detector parameter.
pub fn detection_loss_gradient() -> Vec<Case> {
    let mut r = rng(10);
    let model = toy_expert(16, 2, &mut r);
    let m = match_anchors(model.anchors(), &toy_truth(), 2, 0.5, 0.4).unwrap();
    assert!(m.num_positive() > 0 && m.cls_mask().iter().filter(|&&b| b).count() > m.num_positive());
    let image = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let (value, grads) = analytic(&params, |g, v| {
        let x = g.constant(image.clone());
        let h = model.forward_graph(g, x, v).unwrap();
        detection_loss(g, h.cls, h.reg, &m, 0.25, 2.0).unwrap().total
    });
    let img = ref_image(&image);
    let t = ref_targets(&m);
    let per = model.anchors().config.per_location();
    let pool = model.arch().pool.clone();
    vec![check_against_reference(
        "detection loss",
        value,
        &grads,
        &params.iter().map(to_f64).collect::<Vec<_>>(),
        |p| {
            let (cls, reg) = reference::expert_forward(&img, p, &pool, per, 2);
            reference::detection_loss(&cls, &reg, &t, 0.25, 2.0)
        },
    )]
}

/// Full gating loss with respect to every gate parameter: softmax gate,
/// fusion of three frozen expert outputs and the joint detection loss on a
/// 16x16 image.
pub fn gating_loss_gradient() -> Vec<Case> {
    let mut r = rng(11);
    let experts: Vec<ExpertModel> = (0..3).map(|_| toy_expert(16, 2, &mut r)).collect();
    let image = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
    let outputs: Vec<_> = experts
        .iter()
        .map(|e| expert_forward(e, &image.clone().reshape(&[3, 16, 16]).unwrap()).unwrap())
        .collect();
    let m = match_anchors(experts[0].anchors(), &toy_truth(), 2, 0.5, 0.4).unwrap();
    let gate = GatingModel::new(
        vec!["e0".into(), "e1".into(), "e2".into()],
        [16, 16],
        &GateArch { channels: vec![4, 4] },
        &TrainConfig::default(),
        &mut r,
    )
    .unwrap();
    let theta: Vec<Tensor> = gate
        .params()
        .iter()
        .map(|p| random_tensor(p.value.shape(), -1.0, 1.0, &mut r))
        .collect();
    let (value, grads) = analytic(&theta, |g, v| {
        let x = g.constant(image.clone());
        let w = gate.forward_graph(g, x, v).unwrap();
        let cls: Vec<Var> = outputs.iter().map(|o| g.constant(o.cls_probs.clone())).collect();
        let reg: Vec<Var> = outputs.iter().map(|o| g.constant(o.reg_offsets.clone())).collect();
        let y_cls = g.weighted_sum(w, &cls).unwrap();
        let y_reg = g.weighted_sum(w, &reg).unwrap();
        detection_loss(g, y_cls, y_reg, &m, 0.25, 2.0).unwrap().total
    });
    let img = ref_image(&image);
    let t = ref_targets(&m);
    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        let w = t.shape()[1];
        t.data().chunks(w).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    };
    let cls: Vec<Vec<Vec<f64>>> = outputs.iter().map(|o| rows(&o.cls_probs)).collect();
    let reg: Vec<Vec<Vec<f64>>> = outputs.iter().map(|o| rows(&o.reg_offsets)).collect();
    let fuse = |w: &[f64], parts: &[Vec<Vec<f64>>]| -> Vec<Vec<f64>> {
        (0..parts[0].len())
            .map(|a| (0..parts[0][a].len()).map(|c| (0..w.len()).map(|i| w[i] * parts[i][a][c]).sum()).collect())
            .collect()
    };
    vec![check_against_reference(
        "gating loss",
        value,
        &grads,
        &theta.iter().map(to_f64).collect::<Vec<_>>(),
        |p| {
            let w = reference::gate_forward(&img, p);
            reference::detection_loss(&fuse(&w, &cls), &fuse(&w, &reg), &t, 0.25, 2.0)
        },
    )]
}
