//! Independent f64 forward passes of the detector and gate, written from the
//! definitions rather than from the library's kernels. Central differences
//! on these are free of the f32 rounding floor.

/// NCHW activations for a single image.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

/// Same-size 3x3 convolution with zero padding 1; `w` is `[co, ci, 3, 3]`.
pub fn conv3(x: &Map, w: &[f64], b: &[f64]) -> Map {
    let co = b.len();
    let mut v = vec![0.0; co * x.h * x.w];
    for o in 0..co {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = b[o];
                for i in 0..x.c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            s += w[((o * x.c + i) * 3 + ky) * 3 + kx] * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                v[(o * x.h + y) * x.w + xx] = s;
            }
        }
    }
    Map { c: co, h: x.h, w: x.w, v }
}

pub fn relu(mut x: Map) -> Map {
    x.v.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn pool2(x: &Map) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut v = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| x.at(c, 2 * y + dy, 2 * xx + dx))
                    .fold(f64::NEG_INFINITY, f64::max);
                v.push(m);
            }
        }
    }
    Map { c: x.c, h, w, v }
}

/// Head map to per-anchor rows: anchor `(y, x, k)` reads channels
/// `k * width .. (k + 1) * width`.
pub fn rows(x: &Map, per: usize, width: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for y in 0..x.h {
        for xx in 0..x.w {
            for k in 0..per {
                out.push((0..width).map(|c| x.at(k * width + c, y, xx)).collect());
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Backbone then both heads. `params` follow the library's order: conv
/// blocks as (w, b) pairs, then cls (w, b), then reg (w, b).
pub fn expert_forward(
    image: &Map,
    params: &[Vec<f64>],
    pool: &[bool],
    per: usize,
    classes: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut h = image.clone();
    for (i, &p) in pool.iter().enumerate() {
        h = relu(conv3(&h, &params[2 * i], &params[2 * i + 1]));
        if p {
            h = pool2(&h);
        }
    }
    let k = 2 * pool.len();
    let cls = rows(&conv3(&h, &params[k], &params[k + 1]), per, classes)
        .into_iter()
        .map(|r| r.into_iter().map(sigmoid).collect())
        .collect();
    let reg = rows(&conv3(&h, &params[k + 2], &params[k + 3]), per, 4);
    (cls, reg)
}

/// Conv blocks each followed by ReLU and 2x2 pooling, global average pool,
/// dense layer, softmax.
pub fn gate_forward(image: &Map, params: &[Vec<f64>]) -> Vec<f64> {
    let blocks = (params.len() - 2) / 2;
    let mut h = image.clone();
    for i in 0..blocks {
        h = pool2(&relu(conv3(&h, &params[2 * i], &params[2 * i + 1])));
    }
    let area = (h.h * h.w) as f64;
    let feat: Vec<f64> = (0..h.c).map(|c| h.v[c * h.h * h.w..(c + 1) * h.h * h.w].iter().sum::<f64>() / area).collect();
    let (w, b) = (&params[2 * blocks], &params[2 * blocks + 1]);
    let n = b.len();
    let logits: Vec<f64> = (0..n).map(|j| b[j] + (0..h.c).map(|c| feat[c] * w[c * n + j]).sum::<f64>()).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub struct Targets {
    /// 1 positive, 0 negative, -1 ignored.
    pub label: Vec<i8>,
    pub cls: Vec<Vec<f64>>,
    pub reg: Vec<[f64; 4]>,
}

/// `(smooth-L1 over positives + focal over non-ignored) / max(1, positives)`.
pub fn detection_loss(cls: &[Vec<f64>], reg: &[Vec<f64>], t: &Targets, alpha: f64, gamma: f64) -> f64 {
    let eps = 1e-6;
    let pos = t.label.iter().filter(|&&l| l == 1).count();
    let norm = pos.max(1) as f64;
    let mut focal = 0.0;
    let mut smooth = 0.0;
    for a in 0..cls.len() {
        if t.label[a] < 0 {
            continue;
        }
        for (c, &p) in cls[a].iter().enumerate() {
            let p = p.clamp(eps, 1.0 - eps);
            focal += if t.cls[a][c] > 0.5 {
                -alpha * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
            };
        }
        if t.label[a] == 1 {
            for k in 0..4 {
                let d = (reg[a][k] - t.reg[a][k]).abs();
                smooth += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
    }
    (focal + smooth) / norm
}

/// Central differences of `f` at every coordinate of every parameter tensor.
pub fn central_differences(params: &[Vec<f64>], h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut grads = Vec::with_capacity(params[k].len());
        for i in 0..params[k].len() {
            let x = params[k][i];
            work[k][i] = x + h;
            let up = f(&work);
            work[k][i] = x - h;
            let down = f(&work);
            work[k][i] = x;
            grads.push((up - down) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}
