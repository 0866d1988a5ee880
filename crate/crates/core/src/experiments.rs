//! Experiment runners: method comparison, incremental fusion, gate-weight
//! ranking and the per-expert accuracy matrix. Every cell derives its
//! randomness from the seed and the domain it concerns, so reports depend only
//! on the configuration.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::FORMAT_VERSION;
use crate::detector::{fine_tune, train_expert, ExpertModel, ExpertOutput, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::mean_average_precision;
use crate::gating::{
    cache_outputs, compute_gate, mean_gate_weights, retrain_top_k, train_gating, uniform_weights, GatingModel,
};
use crate::infer::{ground_truth, infer_cached};
use crate::rng::derive_seed;
use crate::synth::{generate_domain_dataset, make_experiment_domains, DomainSpec, ExperimentDomains, SceneSample};

pub const EXPERIMENTS: &[&str] = &["method_comparison", "incremental", "weight_ranking", "expert_matrix"];

pub const METHODS: &[&str] = &["max_single", "fine_tune", "average", "gating_all", "gating_topk"];

/// Seed of the dataset a domain plays in a given role (`train`, `heldout`,
/// `test`).
pub fn data_seed(master: u64, domain_id: &str, role: &str) -> u64 {
    derive_seed(master, &format!("data/{role}/{domain_id}"), 0)
}

/// Training config of the expert for `domain_id`, seeded from its own stream.
pub fn expert_config(base: &TrainConfig, master: u64, domain_id: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(master, &format!("expert/{domain_id}"), 0),
        ..base.clone()
    }
}

/// Config for a gate trained on the dataset of `domain_id`.
pub fn gate_config(base: &TrainConfig, master: u64, domain_id: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(master, &format!("gate/{domain_id}"), 0),
        ..base.clone()
    }
}

/// Config for fine-tuning on the dataset of `domain_id`.
pub fn fine_tune_config(base: &TrainConfig, master: u64, domain_id: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(master, &format!("fine-tune/{domain_id}"), 0),
        ..base.clone()
    }
}

pub fn generate(spec: &DomainSpec, n: usize, master: u64, role: &str, size: [usize; 2]) -> Result<Vec<SceneSample>> {
    generate_domain_dataset(spec, n, data_seed(master, &spec.domain_id, role), (size[0], size[1]))
}

pub struct TargetData {
    /// Few-shot training set drawn from the perturbed domain.
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    /// Expert outputs on `test`, indexed `[sample][expert]`.
    pub test_cache: Vec<Vec<ExpertOutput>>,
}

/// Everything one seed of an experiment needs: data, trained experts and
/// cached expert outputs on each target's test set.
pub struct World {
    pub seed: u64,
    pub domains: ExperimentDomains,
    pub experts: Vec<ExpertModel>,
    pub heldout: Vec<Vec<SceneSample>>,
    pub targets: Vec<TargetData>,
}

impl World {
    pub fn build(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let domains = make_experiment_domains(&config.preset, seed)?;
        let size = config.detector.image_size;
        let layout = &domains.layout;
        let mut experts = Vec::with_capacity(domains.sources.len());
        let mut heldout = Vec::with_capacity(domains.sources.len());
        for spec in &domains.sources {
            let train = generate(spec, layout.source_train, seed, "train", size)?;
            let (model, _) = train_expert(&spec.domain_id, &train, &config.detector, &expert_config(&config.expert, seed, &spec.domain_id))?;
            experts.push(model);
            heldout.push(generate(spec, layout.source_heldout, seed, "heldout", size)?);
        }
        let refs: Vec<&ExpertModel> = experts.iter().collect();
        let targets = domains
            .targets
            .iter()
            .map(|t| {
                let test = generate(&t.target, layout.target_test, seed, "test", size)?;
                Ok(TargetData {
                    train: generate(&t.train, t.train_size, seed, "train", size)?,
                    test_cache: cache_outputs(&refs, &test)?,
                    test,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            domains,
            experts,
            heldout,
            targets,
        })
    }

    /// Domain id of target `t`'s few-shot training set.
    pub fn train_id(&self, t: usize) -> &str {
        &self.domains.targets[t].train.domain_id
    }

    pub fn expert_refs(&self) -> Vec<&ExpertModel> {
        self.experts.iter().collect()
    }

    /// mAP (in percent) of the subset `experts` fused with per-image
    /// `weights` on target `t`.
    fn score(&self, config: &RunConfig, t: usize, experts: &[usize], weights: &[Vec<f32>]) -> Result<f64> {
        let target = &self.targets[t];
        let cache: Vec<Vec<ExpertOutput>> = target
            .test_cache
            .iter()
            .map(|row| experts.iter().map(|&i| row[i].clone()).collect())
            .collect();
        let first = &self.experts[0];
        let dets = infer_cached(&cache, weights, first.anchors(), first.meta.arch.image_size, &config.inference)?;
        let summary = mean_average_precision(&dets, &ground_truth(&target.test), first.num_classes(), config.inference.eval_iou);
        Ok(100.0 * summary.map)
    }

    fn score_gate(&self, config: &RunConfig, t: usize, experts: &[usize], gate: &GatingModel) -> Result<f64> {
        let weights = self.targets[t]
            .test
            .iter()
            .map(|s| compute_gate(gate, &s.image))
            .collect::<Result<Vec<_>>>()?;
        self.score(config, t, experts, &weights)
    }

    fn score_constant(&self, config: &RunConfig, t: usize, experts: &[usize], w: &[f32]) -> Result<f64> {
        let weights = vec![w.to_vec(); self.targets[t].test.len()];
        self.score(config, t, experts, &weights)
    }

    pub fn single_expert_map(&self, config: &RunConfig, t: usize, expert: usize) -> Result<f64> {
        self.score_constant(config, t, &[expert], &[1.0])
    }

    pub fn gating_all(&self, config: &RunConfig, t: usize) -> Result<GatingModel> {
        let (gate, _) = train_gating(
            &self.expert_refs(),
            &self.targets[t].train,
            &config.gate,
            &gate_config(&config.gating, self.seed, self.train_id(t)),
        )?;
        Ok(gate)
    }
}

fn map_of(model: &ExpertModel, data: &[SceneSample], config: &RunConfig) -> Result<f64> {
    let cache = cache_outputs(&[model], data)?;
    let dets = infer_cached(
        &cache,
        &vec![vec![1.0]; data.len()],
        model.anchors(),
        model.meta.arch.image_size,
        &config.inference,
    )?;
    Ok(100.0 * mean_average_precision(&dets, &ground_truth(data), model.num_classes(), config.inference.eval_iou).map)
}

pub fn build_worlds(config: &RunConfig) -> Result<Vec<World>> {
    config.seeds.iter().map(|&s| World::build(config, s)).collect()
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// A target-by-column grid of medians over seeds, with the per-seed values
/// it was reduced from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub format_version: u32,
    pub experiment: String,
    pub preset: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub targets: Vec<String>,
    /// `[target][column]` medians.
    pub medians: Vec<Vec<f64>>,
    /// `[seed][target][column]`.
    pub per_seed: Vec<Vec<Vec<f64>>>,
    pub config: serde_json::Value,
}

impl TableReport {
    fn new(experiment: &str, config: &RunConfig, columns: Vec<String>, targets: Vec<String>, per_seed: Vec<Vec<Vec<f64>>>) -> Self {
        let medians = (0..targets.len())
            .map(|t| {
                (0..columns.len())
                    .map(|c| median(&per_seed.iter().map(|s| s[t][c]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            experiment: experiment.into(),
            preset: config.preset.clone(),
            seed: config.seed,
            seeds: config.seeds.clone(),
            columns,
            targets,
            medians,
            per_seed,
            config: config.snapshot(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Header row, then one row per target; values with four decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (t, row) in self.targets.iter().zip(&self.medians) {
            out.push_str(t);
            for v in row {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

fn target_ids(worlds: &[World]) -> Vec<String> {
    worlds[0].domains.targets.iter().map(|t| t.target.domain_id.clone()).collect()
}

fn top_k(config: &RunConfig, world: &World) -> usize {
    config.top_k.unwrap_or(world.domains.top_k)
}

/// One row per target with columns [`METHODS`] (mAP in percent).
pub fn run_method_comparison_on(worlds: &[World], config: &RunConfig) -> Result<TableReport> {
    let mut per_seed = Vec::with_capacity(worlds.len());
    for w in worlds {
        let n = w.experts.len();
        let mut rows = Vec::new();
        for t in 0..w.targets.len() {
            let singles = (0..n).map(|i| w.single_expert_map(config, t, i)).collect::<Result<Vec<_>>>()?;
            let max_single = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);

            // fine-tune the expert that scores best on the few-shot set
            let train = &w.targets[t].train;
            let few_shot = w.experts.iter().map(|e| map_of(e, train, config)).collect::<Result<Vec<_>>>()?;
            let best = (0..n).fold(0, |b, i| if few_shot[i] > few_shot[b] { i } else { b });
            let ft_cfg = fine_tune_config(&config.fine_tune, w.seed, w.train_id(t));
            let (tuned, _) = fine_tune(&w.experts[best], train, &ft_cfg)?;
            let fine_tuned = map_of(&tuned, &w.targets[t].test, config)?;

            let all: Vec<usize> = (0..n).collect();
            let average = w.score_constant(config, t, &all, &uniform_weights(n))?;
            let gate = w.gating_all(config, t)?;
            let gating_all = w.score_gate(config, t, &all, &gate)?;
            let topk = retrain_top_k(
                &w.expert_refs(),
                train,
                top_k(config, w).min(n),
                None,
                &config.gate,
                &gate_config(&config.gating, w.seed, w.train_id(t)),
            )?;
            let gating_topk = w.score_gate(config, t, &topk.selected, &topk.gate)?;
            rows.push(vec![max_single, fine_tuned, average, gating_all, gating_topk]);
        }
        per_seed.push(rows);
    }
    Ok(TableReport::new(
        "method_comparison",
        config,
        METHODS.iter().map(|s| s.to_string()).collect(),
        target_ids(worlds),
        per_seed,
    ))
}

/// Gate trained on expert prefixes `S1..Sm`; one column per `m`.
pub fn run_incremental_on(worlds: &[World], config: &RunConfig) -> Result<TableReport> {
    let n = worlds[0].experts.len();
    let counts = config.model_counts.clone().unwrap_or_else(|| (1..=n).collect());
    if counts.iter().any(|&m| m == 0 || m > n) {
        return Err(Error::config("model_counts", format!("counts must lie in 1..={n}")));
    }
    let mut per_seed = Vec::with_capacity(worlds.len());
    for w in worlds {
        let mut rows = Vec::new();
        for t in 0..w.targets.len() {
            let mut row = Vec::with_capacity(counts.len());
            for &m in &counts {
                let prefix: Vec<&ExpertModel> = w.experts[..m].iter().collect();
                let (gate, _) = train_gating(&prefix, &w.targets[t].train, &config.gate, &gate_config(&config.gating, w.seed, w.train_id(t)))?;
                row.push(w.score_gate(config, t, &(0..m).collect::<Vec<_>>(), &gate)?);
            }
            rows.push(row);
        }
        per_seed.push(rows);
    }
    Ok(TableReport::new(
        "incremental",
        config,
        counts.iter().map(|m| format!("m{m}")).collect(),
        target_ids(worlds),
        per_seed,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub expert_id: String,
    pub mean_weight_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub target: String,
    pub seed: u64,
    pub ranking: Vec<RankEntry>,
    pub selected: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRankingReport {
    pub format_version: u32,
    pub preset: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub reports: Vec<RankingReport>,
    pub config: serde_json::Value,
}

/// Gate over all experts trained on each target's few-shot set, ranked by
/// mean weight over that set.
pub fn run_weight_ranking_on(worlds: &[World], config: &RunConfig) -> Result<WeightRankingReport> {
    let mut reports = Vec::new();
    let mut k_used = 0;
    for w in worlds {
        let k = top_k(config, w).min(w.experts.len());
        k_used = k;
        for (t, target) in w.targets.iter().enumerate() {
            let gate = w.gating_all(config, t)?;
            let ranking = mean_gate_weights(&gate, &target.train)?;
            reports.push(RankingReport {
                target: w.domains.targets[t].target.domain_id.clone(),
                seed: w.seed,
                selected: ranking[..k].iter().map(|r| r.expert_id.clone()).collect(),
                ranking: ranking
                    .iter()
                    .map(|r| RankEntry {
                        expert_id: r.expert_id.clone(),
                        mean_weight_pct: r.percent(),
                    })
                    .collect(),
            });
        }
    }
    Ok(WeightRankingReport {
        format_version: FORMAT_VERSION,
        preset: config.preset.clone(),
        seed: config.seed,
        seeds: config.seeds.clone(),
        k: k_used,
        reports,
        config: config.snapshot(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertMatrixReport {
    pub format_version: u32,
    pub preset: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub experts: Vec<String>,
    /// Held-out source domains followed by target test sets.
    pub domains: Vec<String>,
    /// `[expert][domain]` median mAP in percent.
    pub ap: Vec<Vec<f64>>,
    /// `[seed][expert][domain]`.
    pub per_seed: Vec<Vec<Vec<f64>>>,
    /// Best expert score per domain (medians).
    pub max_per_domain: Vec<f64>,
    pub config: serde_json::Value,
}

pub fn run_expert_matrix_on(worlds: &[World], config: &RunConfig) -> Result<ExpertMatrixReport> {
    let first = &worlds[0];
    let mut domains: Vec<String> = first.domains.sources.iter().map(|s| s.domain_id.clone()).collect();
    domains.extend(first.domains.targets.iter().map(|t| t.target.domain_id.clone()));
    let mut per_seed = Vec::with_capacity(worlds.len());
    for w in worlds {
        let mut grid = Vec::with_capacity(w.experts.len());
        for (i, e) in w.experts.iter().enumerate() {
            let mut row = w.heldout.iter().map(|h| map_of(e, h, config)).collect::<Result<Vec<_>>>()?;
            for t in 0..w.targets.len() {
                row.push(w.single_expert_map(config, t, i)?);
            }
            grid.push(row);
        }
        per_seed.push(grid);
    }
    let ne = first.experts.len();
    let ap: Vec<Vec<f64>> = (0..ne)
        .map(|e| {
            (0..domains.len())
                .map(|d| median(&per_seed.iter().map(|s| s[e][d]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let max_per_domain = (0..domains.len())
        .map(|d| ap.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(ExpertMatrixReport {
        format_version: FORMAT_VERSION,
        preset: config.preset.clone(),
        seed: config.seed,
        seeds: config.seeds.clone(),
        experts: first.experts.iter().map(|e| e.meta.expert_id.clone()).collect(),
        domains,
        ap,
        per_seed,
        max_per_domain,
        config: config.snapshot(),
    })
}

/// Files an experiment writes, relative to its output directory.
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Runs a named experiment and renders its artifacts.
pub fn run_experiment(name: &str, config: &RunConfig) -> Result<Vec<Artifact>> {
    if !EXPERIMENTS.contains(&name) {
        return Err(Error::config(
            "experiment",
            format!("unknown experiment `{name}` (known: {})", EXPERIMENTS.join(", ")),
        ));
    }
    let worlds = build_worlds(config)?;
    Ok(match name {
        "method_comparison" | "incremental" => {
            let report = if name == "incremental" {
                run_incremental_on(&worlds, config)?
            } else {
                run_method_comparison_on(&worlds, config)?
            };
            vec![
                Artifact {
                    name: format!("{name}.csv"),
                    contents: report.to_csv(),
                },
                Artifact {
                    name: format!("{name}.json"),
                    contents: json(&report),
                },
            ]
        }
        "weight_ranking" => vec![Artifact {
            name: "weight_ranking.json".into(),
            contents: json(&run_weight_ranking_on(&worlds, config)?),
        }],
        _ => vec![Artifact {
            name: "expert_matrix.json".into(),
            contents: json(&run_expert_matrix_on(&worlds, config)?),
        }],
    })
}
