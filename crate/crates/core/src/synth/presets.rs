use serde::{Deserialize, Serialize};

use super::DomainSpec;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const PRESETS: &[&str] = &["small5", "small5-match", "single", "paper30"];

/// Upper bound on the relative scale shift between a target and its few-shot
/// training domain.
pub const MAX_SCALE_SHIFT: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataLayout {
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub source_train: usize,
    pub source_heldout: usize,
    pub target_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPair {
    /// Inference domain.
    pub target: DomainSpec,
    /// Few-shot training domain: the target seen from a slightly different
    /// viewpoint.
    pub train: DomainSpec,
    pub train_size: usize,
    /// Source whose generator the target was derived from, if any.
    pub adjacent_source: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDomains {
    pub preset: String,
    pub sources: Vec<DomainSpec>,
    pub targets: Vec<TargetPair>,
    /// Minimum circular background-hue distance between any two sources.
    pub separation_margin: f32,
    pub layout: DataLayout,
    /// Default expert count kept by top-k selection.
    pub top_k: usize,
}

impl ExperimentDomains {
    /// Sources, then each target followed by its training domain.
    pub fn all(&self) -> Vec<&DomainSpec> {
        let mut out: Vec<&DomainSpec> = self.sources.iter().collect();
        for t in &self.targets {
            out.push(&t.target);
            out.push(&t.train);
        }
        out
    }
}

pub fn hue_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Source `k` of `n`: every source owns one object hue, and its clutter uses
/// the object hues of all other sources.
fn source_spec(k: usize, n: usize) -> DomainSpec {
    let object_hues: Vec<f32> = (0..n).map(|i| i as f32 / n as f32).collect();
    let base = 6.0 + (k % 3) as f32;
    let aspect = [[0.6, 1.2], [0.8, 1.6], [0.7, 1.4]][k % 3];
    DomainSpec {
        domain_id: format!("S{}", k + 1),
        background_hue: (k as f32 + 0.5) / n as f32,
        background_saturation: 0.25 + 0.1 * (k % 3) as f32,
        background_value: 0.3 + 0.08 * (k % 4) as f32,
        texture_amplitude: 0.02 + 0.02 * (k % 3) as f32,
        texture_period: 5.0 + 2.0 * (k % 4) as f32,
        object_hue: object_hues[k],
        object_count_range: [1, 3],
        object_scale_range: [base, base + 5.0],
        object_aspect_range: aspect,
        noise_sigma: 0.02 + 0.01 * (k % 3) as f32,
        occluder_density: 1.5,
        occluder_hues: object_hues
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .map(|(_, &h)| h)
            .collect(),
        class_set: vec![0],
    }
}

/// Nuisance-only perturbation: background hue jitter and a bounded
/// object-scale shift.
fn perturb<R: rand::Rng>(spec: &DomainSpec, id: String, hue_jitter: f32, max_shift: f32, rng: &mut R) -> DomainSpec {
    let shift = 1.0 + rng.gen_range(-max_shift..=max_shift);
    let mut out = spec.clone();
    out.domain_id = id;
    out.background_hue = (spec.background_hue + rng.gen_range(-hue_jitter..=hue_jitter)).rem_euclid(1.0);
    out.object_scale_range = spec.object_scale_range.map(|v| v * shift);
    out
}

fn renamed(spec: &DomainSpec, id: &str) -> DomainSpec {
    DomainSpec {
        domain_id: id.into(),
        ..spec.clone()
    }
}

pub fn make_experiment_domains(preset: &str, seed: u64) -> Result<ExperimentDomains> {
    let mut rng = stream_rng(seed, "preset", 0);
    let layout = DataLayout {
        image_size: [32, 32],
        source_train: 100,
        source_heldout: 60,
        target_test: 100,
    };
    let (n, targets, top_k) = match preset {
        "small5" => {
            let s = source_spec(2, 5);
            let target = perturb(&s, "T1".into(), 0.03, 0.1, &mut rng);
            let train = perturb(&target, "T1p".into(), 0.03, MAX_SCALE_SHIFT, &mut rng);
            (5, vec![pair(target, train, 60, 2)], 2)
        }
        "small5-match" => {
            let s = source_spec(2, 5);
            (5, vec![pair(renamed(&s, "T1"), renamed(&s, "T1p"), 60, 2)], 2)
        }
        "single" => {
            let s = source_spec(0, 5);
            (1, vec![pair(renamed(&s, "T1"), renamed(&s, "T1p"), 60, 0)], 1)
        }
        "paper30" => {
            let sizes = [44, 80, 115, 103];
            let adjacent = [1, 8, 15, 22];
            let targets = (0..4)
                .map(|t| {
                    let s = source_spec(adjacent[t], 30);
                    let target = perturb(&s, format!("T{}", t + 1), 0.01, 0.1, &mut rng);
                    let train = perturb(&target, format!("T{}p", t + 1), 0.01, MAX_SCALE_SHIFT, &mut rng);
                    pair(target, train, sizes[t], adjacent[t])
                })
                .collect();
            (30, targets, 5)
        }
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            ))
        }
    };
    let sources: Vec<DomainSpec> = if preset == "single" {
        vec![source_spec(0, 5)]
    } else {
        (0..n).map(|k| source_spec(k, n)).collect()
    };
    Ok(ExperimentDomains {
        preset: preset.into(),
        separation_margin: 0.5 / n.max(2) as f32,
        sources,
        targets,
        layout,
        top_k,
    })
}

fn pair(target: DomainSpec, train: DomainSpec, train_size: usize, adjacent: usize) -> TargetPair {
    TargetPair {
        target,
        train,
        train_size,
        adjacent_source: Some(adjacent),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn preset_shapes() {
        let d = make_experiment_domains("small5", 1).unwrap();
        assert_eq!(d.sources.len(), 5);
        assert_eq!(d.targets.len(), 1);
        let d = make_experiment_domains("paper30", 1).unwrap();
        assert_eq!(d.sources.len(), 30);
        assert_eq!(d.targets.len(), 4);
        let sizes: Vec<usize> = d.targets.iter().map(|t| t.train_size).collect();
        assert_eq!(sizes, vec![44, 80, 115, 103]);
        assert!(matches!(make_experiment_domains("nope", 1), Err(Error::Config { .. })));
    }

    #[test]
    fn ids_unique_and_specs_valid() {
        for preset in PRESETS {
            let d = make_experiment_domains(preset, 3).unwrap();
            let all = d.all();
            let ids: HashSet<&str> = all.iter().map(|s| s.domain_id.as_str()).collect();
            assert_eq!(ids.len(), all.len(), "{preset}");
            for s in all {
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn sources_separated_by_margin() {
        for preset in PRESETS {
            let d = make_experiment_domains(preset, 3).unwrap();
            for (i, a) in d.sources.iter().enumerate() {
                for b in &d.sources[i + 1..] {
                    assert_ne!(a, b);
                    assert!(hue_distance(a.background_hue, b.background_hue) >= d.separation_margin - 1e-6);
                }
            }
        }
    }

    #[test]
    fn few_shot_domain_differs_only_in_nuisance() {
        for seed in 0..20 {
            for preset in ["small5", "paper30"] {
                let d = make_experiment_domains(preset, seed).unwrap();
                for t in &d.targets {
                    let (a, b) = (&t.target, &t.train);
                    assert_eq!(a.class_set, b.class_set);
                    assert_eq!(a.object_hue, b.object_hue);
                    assert_eq!(a.occluder_hues, b.occluder_hues);
                    assert_eq!(a.noise_sigma, b.noise_sigma);
                    for i in 0..2 {
                        let shift = (b.object_scale_range[i] / a.object_scale_range[i] - 1.0).abs();
                        assert!(shift <= MAX_SCALE_SHIFT + 1e-5, "{shift}");
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(
            make_experiment_domains("small5", 9).unwrap(),
            make_experiment_domains("small5", 9).unwrap()
        );
    }
}
