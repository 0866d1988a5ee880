#![allow(dead_code)]

//! Test-only oracles shared by the integration suites.

pub mod grad_cases;
pub mod oracles;
pub mod reference;

use gatefuse::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-2;
pub const FD_TOL: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are never crossed by a
/// finite-difference step.
pub fn kink_free_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1f32..1.0);
            if rng.gen_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input, element, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Central finite differences against the analytic gradient of every input.
///
/// `build` may return a tensor of any shape; it is reduced to a scalar by a
/// fixed projection `sum(r * out)` with seeded weights `r` drawn from
/// `[0.5, 1.5]`. The analytic side projects inside the graph; the numeric
/// side evaluates `build` forward only and applies the projection in f64.
/// Comparison is element-wise relative error `|a - n| / max(|a|, |n|)`,
/// skipping elements with `|a| < 1e-6`.
pub fn check_gradients(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> GradReport {
    check_gradients_projected(inputs, None, build)
}

/// As [`check_gradients`] with explicit projection weights.
pub fn check_gradients_projected(
    inputs: &[Tensor],
    projection: Option<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = projection.unwrap_or_else(|| projection_weights(g.value(out).shape()));
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).expect("backward");

    let eval = |perturbed: &[Tensor]| -> Vec<f32> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().to_vec()
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let a = analytic.data()[i] as f64;
            if a.abs() < FD_FLOOR {
                continue;
            }
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (yp, ym) = (eval(&plus), eval(&minus));
            let h2 = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            let numeric: f64 = weights
                .data()
                .iter()
                .zip(yp.iter().zip(&ym))
                .map(|(&r, (&p, &m))| r as f64 * (p as f64 - m as f64))
                .sum::<f64>()
                / h2;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    report
}

fn projection_weights(shape: &[usize]) -> Tensor {
    if shape.iter().product::<usize>() == 1 {
        return Tensor::ones(shape);
    }
    let mut r = rng(0x5eed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| r.gen_range(0.5f32..1.5))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `r[i, k] = [i == rows - 1] + [k == cols - 1]`: along either axis each
/// softmax group is projected onto (a constant plus) its last entry, which
/// keeps every softmax gradient `y_j (r_j - mean_y r)` away from zero.
pub fn last_entry_projection(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows)
        .flat_map(|i| (0..cols).map(move |k| ((i + 1 == rows) as u8 + (k + 1 == cols) as u8) as f32))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}


/// Element-wise comparison of analytic gradients with numeric ones under the
/// same relative-error rule and floor as [`check_gradients`].
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Vec<f64>]) -> GradReport {
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.numel(), n.len());
        for (i, (&a, &n)) in a.data().iter().zip(n).enumerate() {
            let a = a as f64;
            if a.abs() < FD_FLOOR {
                continue;
            }
            let rel = (a - n).abs() / a.abs().max(n.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((k, i, a, n));
            }
        }
    }
    report
}
