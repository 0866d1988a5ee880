use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    GlobalAvgPool(Var),
    AnchorRows {
        x: Var,
        per_location: usize,
        width: usize,
    },
    WeightedSum {
        gate: Var,
        inputs: Vec<Var>,
    },
    Focal {
        probs: Var,
        targets: Tensor,
        mask: Vec<bool>,
        alpha: f32,
        gamma: f32,
        norm: f32,
    },
    SmoothL1 {
        pred: Var,
        target: Tensor,
        mask: Vec<bool>,
        norm: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records executed operations in execution (hence topological) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`]; only nodes that require
/// gradients have an entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of `var` (if any) into `param.grad`.
    pub fn accumulate_into(&self, var: Var, param: &mut Parameter) -> Result<()> {
        if let Some(g) = self.get(var) {
            param.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Clamp applied to probabilities before taking logs in the focal loss.
pub const PROB_EPS: f32 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// A frozen input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, param: &Parameter) -> Var {
        self.variable(param.value.clone())
    }

    /// Parameter bound as a constant, for frozen models.
    pub fn frozen(&mut self, param: &Parameter) -> Var {
        self.constant(param.value.clone())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::config("stride", "must be positive"));
        }
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if bs != [ws[0]] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                lhs: bs.to_vec(),
                rhs: vec![ws[0]],
            });
        }
        let geom = ConvGeom::new(xs, ws, stride, pad).ok_or_else(|| Error::Dimension {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        })?;
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// `y = x · W + b` with `W` of shape `[in, out]`. A 1-D input yields a
    /// 1-D output; otherwise the input is flattened to `[batch, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, width) = dense_dims(&xs);
        if ws.len() != 2 || ws[0] != width {
            return Err(Error::Dimension {
                op: "dense",
                lhs: xs,
                rhs: ws,
            });
        }
        let out_w = ws[1];
        self.value(b).expect_shape("dense bias", &[out_w])?;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0f32; batch * out_w];
        for n in 0..batch {
            let xrow = &xd[n * width..(n + 1) * width];
            for j in 0..out_w {
                let mut acc = bd[j] as f64;
                for (i, &xv) in xrow.iter().enumerate() {
                    acc += xv as f64 * wd[i * out_w + j] as f64;
                }
                out[n * out_w + j] = acc as f32;
            }
        }
        let shape = if xs.len() == 1 {
            vec![out_w]
        } else {
            vec![batch, out_w]
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dense { x, w, b }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let op = if name == "add" { Op::Add(a, b) } else { Op::Mul(a, b) };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel().max(1) as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Max pooling with a square window; ties resolve to the first maximum
    /// in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::Dimension {
                op: "max_pool2d",
                lhs: xs,
                rhs: vec![kernel, stride],
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.is_empty() {
            return Err(Error::Contract("flatten of a 0-d tensor".into()));
        }
        let shape = vec![xs[0], xs[1..].iter().product()];
        self.reshape(x, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let xd = t.data();
        let mut out = vec![0f32; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let max = (0..dim).map(|k| xd[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0f64;
                for k in 0..dim {
                    let e = ((xd[at(k)] - max) as f64).exp();
                    out[at(k)] = e as f32;
                    total += e;
                }
                for k in 0..dim {
                    out[at(k)] = (out[at(k)] as f64 / total) as f32;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension {
                op: "global_avg_pool",
                lhs: xs,
                rhs: vec![4],
            });
        }
        let hw = xs[2] * xs[3];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Rearranges a head map `[N, per_location * width, gh, gw]` into anchor
    /// rows `[N * gh * gw * per_location, width]`, ordered by batch, grid row,
    /// grid column, then anchor slot.
    pub fn anchor_rows(&mut self, x: Var, per_location: usize, width: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != per_location * width {
            return Err(Error::Dimension {
                op: "anchor_rows",
                lhs: xs,
                rhs: vec![per_location, width],
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![0f32; xd.len()];
        for_anchor_rows(&xs, per_location, width, |src, dst| out[dst] = xd[src]);
        let rows = xs[0] * xs[2] * xs[3] * per_location;
        let value = Tensor::new(vec![rows, width], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::AnchorRows {
                x,
                per_location,
                width,
            },
            rg,
        ))
    }

    /// `Σ_i gate[i] · inputs[i]`, summed in ascending index order.
    pub fn weighted_sum(&mut self, gate: Var, inputs: &[Var]) -> Result<Var> {
        let g = self.value(gate);
        if g.numel() != inputs.len() || inputs.is_empty() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: g.shape().to_vec(),
                rhs: vec![inputs.len()],
            });
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for (i, &v) in inputs.iter().enumerate() {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "weighted_sum input {i} has shape {:?}, expected {:?}",
                    self.value(v).shape(),
                    shape
                )));
            }
        }
        let parts: Vec<&[f32]> = inputs.iter().map(|&v| self.value(v).data()).collect();
        let out = weighted_sum_slices(g.data(), &parts);
        let rg = self.rg(gate) || inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::WeightedSum {
                gate,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Focal loss summed over rows where `mask` is set and divided by `norm`.
    ///
    /// Per element: `-a_t (1 - p_t)^gamma ln(p_t)`, with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn focal_loss(
        &mut self,
        probs: Var,
        targets: &Tensor,
        mask: &[bool],
        alpha: f32,
        gamma: f32,
        norm: f32,
    ) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != targets.shape() || p.ndim() != 2 || mask.len() != p.shape()[0] {
            return Err(Error::Dimension {
                op: "focal_loss",
                lhs: p.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if gamma < 0.0 || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("focal", "alpha must lie in [0,1] and gamma >= 0"));
        }
        let width = p.shape()[1];
        let mut total = 0f64;
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                continue;
            }
            for c in 0..width {
                let i = r * width + c;
                total += focal_term(p.data()[i], targets.data()[i], alpha, gamma).0;
            }
        }
        let value = Tensor::scalar((total / norm as f64) as f32);
        let rg = self.rg(probs);
        Ok(self.push(
            value,
            Op::Focal {
                probs,
                targets: targets.clone(),
                mask: mask.to_vec(),
                alpha,
                gamma,
                norm,
            },
            rg,
        ))
    }

    /// Smooth L1 summed over rows where `mask` is set and divided by `norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, mask: &[bool], norm: f32) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.ndim() != 2 || mask.len() != p.shape()[0] {
            return Err(Error::Dimension {
                op: "smooth_l1",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let width = p.shape()[1];
        let mut total = 0f64;
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                continue;
            }
            for c in 0..width {
                let i = r * width + c;
                total += smooth_l1_term((p.data()[i] - target.data()[i]) as f64).0;
            }
        }
        let value = Tensor::scalar((total / norm as f64) as f32);
        let rg = self.rg(pred);
        Ok(self.push(
            value,
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Nodes are visited once each in
    /// reverse recording order; contributions from fan-out accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("loss is {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, contribution: Vec<f32>) {
        if !self.rg(to) {
            return;
        }
        let shape = self.value(to).shape();
        match &mut grads[to.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), contribution).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad).expect("validated");
                let (dx, dw, db) = conv_backward(&geom, xv.data(), wv.data(), g, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.send(grads, *w, dw);
                }
                self.send(grads, *b, db);
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, width) = dense_dims(xv.shape());
                let out_w = wv.shape()[1];
                let (xd, wd) = (xv.data(), wv.data());
                if self.rg(*x) {
                    let mut dx = vec![0f32; batch * width];
                    for n in 0..batch {
                        for i in 0..width {
                            let mut acc = 0f64;
                            for j in 0..out_w {
                                acc += g[n * out_w + j] as f64 * wd[i * out_w + j] as f64;
                            }
                            dx[n * width + i] = acc as f32;
                        }
                    }
                    self.send(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0f32; width * out_w];
                    for i in 0..width {
                        for j in 0..out_w {
                            let mut acc = 0f64;
                            for n in 0..batch {
                                acc += xd[n * width + i] as f64 * g[n * out_w + j] as f64;
                            }
                            dw[i * out_w + j] = acc as f32;
                        }
                    }
                    self.send(grads, *w, dw);
                }
                let mut db = vec![0f32; out_w];
                for n in 0..batch {
                    for j in 0..out_w {
                        db[j] += g[n * out_w + j];
                    }
                }
                self.send(grads, *b, db);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = xd.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                self.send(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                self.send(grads, *x, dx);
            }
            Op::Scale(x, factor) => {
                let dx = g.iter().map(|&gv| gv * factor).collect();
                self.send(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(bd).map(|(&gv, &q)| gv * q).collect();
                let db = g.iter().zip(ad).map(|(&gv, &p)| gv * p).collect();
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0f32; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                self.send(grads, *x, dx);
            }
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let dot: f64 = (0..dim).map(|k| g[at(k)] as f64 * y[at(k)] as f64).sum();
                        for k in 0..dim {
                            dx[at(k)] = (y[at(k)] as f64 * (g[at(k)] as f64 - dot)) as f32;
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g {
                    dx.extend(std::iter::repeat(gv / hw as f32).take(hw));
                }
                self.send(grads, *x, dx);
            }
            Op::AnchorRows {
                x,
                per_location,
                width,
            } => {
                let xs = self.value(*x).shape();
                let mut dx = vec![0f32; g.len()];
                for_anchor_rows(xs, *per_location, *width, |src, dst| dx[src] = g[dst]);
                self.send(grads, *x, dx);
            }
            Op::WeightedSum { gate, inputs } => {
                let gate_vals = self.value(*gate).data();
                if self.rg(*gate) {
                    let dg = inputs
                        .iter()
                        .map(|&v| {
                            self.value(v)
                                .data()
                                .iter()
                                .zip(g)
                                .map(|(&e, &gv)| e as f64 * gv as f64)
                                .sum::<f64>() as f32
                        })
                        .collect();
                    self.send(grads, *gate, dg);
                }
                for (&v, &w) in inputs.iter().zip(gate_vals) {
                    if self.rg(v) {
                        self.send(grads, v, g.iter().map(|&gv| gv * w).collect());
                    }
                }
            }
            Op::Focal {
                probs,
                targets,
                mask,
                alpha,
                gamma,
                norm,
            } => {
                let p = self.value(*probs).data();
                let width = targets.shape()[1];
                let scale = g[0] as f64 / *norm as f64;
                let mut dp = vec![0f32; p.len()];
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    for c in 0..width {
                        let i = r * width + c;
                        dp[i] = (focal_term(p[i], targets.data()[i], *alpha, *gamma).1 * scale) as f32;
                    }
                }
                self.send(grads, *probs, dp);
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                norm,
            } => {
                let p = self.value(*pred).data();
                let width = target.shape()[1];
                let scale = g[0] as f64 / *norm as f64;
                let mut dp = vec![0f32; p.len()];
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    for c in 0..width {
                        let i = r * width + c;
                        let x = (p[i] - target.data()[i]) as f64;
                        dp[i] = (smooth_l1_term(x).1 * scale) as f32;
                    }
                }
                self.send(grads, *pred, dp);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Fixed-order weighted sum shared by the graph op and plain fusion.
pub(crate) fn weighted_sum_slices(weights: &[f32], parts: &[&[f32]]) -> Vec<f32> {
    let mut out: Vec<f32> = parts[0].iter().map(|&e| weights[0] * e).collect();
    for (w, part) in weights.iter().zip(parts).skip(1) {
        for (o, &e) in out.iter_mut().zip(part.iter()) {
            *o += w * e;
        }
    }
    out
}

/// Value and derivative (w.r.t. `p`) of one focal-loss element. The
/// derivative is zero where the clamp is active.
fn focal_term(p: f32, target: f32, alpha: f32, gamma: f32) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (a, g) = (alpha as f64, gamma as f64);
    let (weight, pt, sign) = if target >= 0.5 {
        (a, clamped as f64, 1.0)
    } else {
        (1.0 - a, 1.0 - clamped as f64, -1.0)
    };
    let (value, d) = focal_core(pt, g);
    let grad = if clamped == p { weight * d * sign } else { 0.0 };
    (weight * value, grad)
}

/// `-(1 - pt)^g ln(pt)` and its derivative in `pt`.
fn focal_core(pt: f64, gamma: f64) -> (f64, f64) {
    let q = 1.0 - pt;
    let ln = pt.ln();
    let value = -q.powf(gamma) * ln;
    let mut d = -q.powf(gamma) / pt;
    if gamma != 0.0 {
        d += gamma * q.powf(gamma - 1.0) * ln;
    }
    (value, d)
}

/// Value and derivative of smooth L1 at residual `x`.
fn smooth_l1_term(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

fn dense_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn for_anchor_rows(xs: &[usize], per_location: usize, width: usize, mut f: impl FnMut(usize, usize)) {
    let (n, gh, gw) = (xs[0], xs[2], xs[3]);
    let channels = per_location * width;
    for b in 0..n {
        for y in 0..gh {
            for x in 0..gw {
                for k in 0..per_location {
                    let row = ((b * gh + y) * gw + x) * per_location + k;
                    for c in 0..width {
                        let src = ((b * channels + k * width + c) * gh + y) * gw + x;
                        f(src, row * width + c);
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Valid output index range along one axis for kernel offset `k`.
    fn range(&self, k: usize, input: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let (k, pad, input) = (k as isize, self.pad as isize, input as isize);
        let lo = (pad - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (input - 1 + pad - k).div_euclid(s) + 1;
        let hi = hi.clamp(0, out as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn conv_forward(g: &ConvGeom, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; g.n * g.o * g.oh * g.ow];
    let mut acc = vec![0f64; g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.o {
            acc.iter_mut().for_each(|a| *a = b[o] as f64);
            for c in 0..g.c {
                let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ky) * g.kw + kx] as f64;
                        let (ox0, ox1) = g.range(kx, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &plane[iy * g.w..][..g.w];
                            let arow = &mut acc[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                arow[ox] += wv * row[ox * g.stride + kx - g.pad] as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let mut dx = want_dx.then(|| vec![0f64; x.len()]);
    let mut dw = want_dw.then(|| vec![0f64; w.len()]);
    let mut db = vec![0f64; g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let gplane = &gout[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            db[o] += gplane.iter().map(|&v| v as f64).sum::<f64>();
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx] as f64;
                        let (ox0, ox1) = g.range(kx, g.w, g.ow);
                        let mut wacc = 0f64;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = xbase + iy * g.w;
                            let grow = &gplane[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                let xi = xrow + ox * g.stride + kx - g.pad;
                                let gv = grow[ox] as f64;
                                wacc += gv * x[xi] as f64;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += gv * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(|a| a as f32).collect::<Vec<f32>>();
    (dx.map(cast), dw.map(cast), cast(db))
}
