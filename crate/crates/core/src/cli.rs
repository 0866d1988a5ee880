//! Command-line front end: argument parsing and artifact orchestration.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::container::{self, FORMAT_VERSION};
use crate::detector::{fine_tune, load_expert, save_expert, train_expert, ExpertModel};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, ClassAp};
use crate::experiments::{data_seed, expert_config, fine_tune_config, gate_config, run_experiment};
use crate::gating::{load_gating, retrain_top_k, save_gating, train_gating, Ensemble};
use crate::geometry::Detection;
use crate::infer::{ground_truth, infer};
use crate::synth::{generate_domain_dataset, load_dataset, load_png, make_experiment_domains, save_dataset, DomainSpec, SceneSample};

#[derive(Debug, Parser)]
#[command(name = "gatefuse", version, about = "Gated fusion of frozen object-detection experts")]
pub struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed for every random stream [default: from config, else 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic datasets for a preset or a single domain spec
    GenData(GenDataArgs),
    /// Train an expert detector on one dataset
    TrainExpert(TrainExpertArgs),
    /// Continue training an expert on a few-shot dataset
    FineTune(FineTuneArgs),
    /// Train a gating network over frozen experts
    TrainGating(TrainGatingArgs),
    /// Rank experts by mean gate weight, keep k and retrain the gate
    SelectTopk(SelectTopkArgs),
    /// Run an ensemble on an image or dataset and write detections
    Infer(InferArgs),
    /// Evaluate an ensemble's mAP on a dataset
    Eval(EvalArgs),
    /// Run an experiment and write its report
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Domain preset [default: from config, else small5]
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML domain spec; generates that domain alone instead of a preset
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Sample count for --spec
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Dataset role for --spec, used to derive its seed
    #[arg(long, default_value = "train")]
    pub role: String,
}

#[derive(Debug, Args)]
pub struct TrainExpertArgs {
    /// Dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file
    #[arg(long)]
    pub out: PathBuf,
    /// Training epochs [default: from config]
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FineTuneArgs {
    /// Expert model to start from
    #[arg(long)]
    pub model: PathBuf,
    /// Few-shot dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file
    #[arg(long)]
    pub out: PathBuf,
    /// Fine-tuning epochs [default: from config]
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainGatingArgs {
    /// Expert model files, in gate output order
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Training dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Output gate file
    #[arg(long)]
    pub out: PathBuf,
    /// Gate training epochs [default: from config]
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectTopkArgs {
    /// Expert model files, in gate output order
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Training dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Experts to keep [default: from config, else 2]
    #[arg(long)]
    pub k: Option<usize>,
    /// Keep these expert ids instead of the automatic selection
    #[arg(long, value_delimiter = ',')]
    pub manual_ids: Option<Vec<String>>,
    /// Output directory for the ranking report and the retrained gate
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Expert model files, in gate output order
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Gate file; uniform 1/n weights when absent
    #[arg(long)]
    pub gate: Option<PathBuf>,
    /// Minimum class probability for a detection [default: from config, else 0.05]
    #[arg(long)]
    pub score_threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    /// PNG image or dataset manifest
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSON file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    /// Dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Output report file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// One of method_comparison, incremental, weight_ranking, expert_matrix
    #[arg(long)]
    pub name: String,
    /// Domain preset [default: from config, else small5]
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated seeds [default: from config, else 1,2,3]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::GenData(a) => override_opt(&mut cfg.preset, a.preset.clone()),
        Command::TrainExpert(a) => override_opt(&mut cfg.expert.epochs, a.epochs),
        Command::FineTune(a) => override_opt(&mut cfg.fine_tune.epochs, a.epochs),
        Command::TrainGating(a) => override_opt(&mut cfg.gating.epochs, a.epochs),
        Command::SelectTopk(a) => {
            if a.k.is_some() {
                cfg.top_k = a.k;
            }
        }
        Command::Infer(InferArgs { ensemble, .. }) | Command::Eval(EvalArgs { ensemble, .. }) => {
            override_opt(&mut cfg.inference.score_threshold, ensemble.score_threshold)
        }
        Command::Experiment(a) => {
            override_opt(&mut cfg.preset, a.preset.clone());
            override_opt(&mut cfg.seeds, a.seeds.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn override_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::GenData(a) => gen_data(&a, &cfg),
        Command::TrainExpert(a) => {
            let (manifest, data) = load_dataset(&a.data)?;
            let tc = expert_config(&cfg.expert, cfg.seed, &manifest.domain_id);
            let (mut model, _) = train_expert(&manifest.domain_id, &data, &cfg.detector, &tc)?;
            model.meta.config = Some(cfg.snapshot());
            save_expert(&model, &a.out)
        }
        Command::FineTune(a) => {
            let base = load_expert(&a.model)?;
            let (manifest, data) = load_dataset(&a.data)?;
            let tc = fine_tune_config(&cfg.fine_tune, cfg.seed, &manifest.domain_id);
            let (mut model, _) = fine_tune(&base, &data, &tc)?;
            model.meta.config = Some(cfg.snapshot());
            save_expert(&model, &a.out)
        }
        Command::TrainGating(a) => {
            let experts = load_experts(&a.models)?;
            let (manifest, data) = load_dataset(&a.data)?;
            let refs: Vec<&ExpertModel> = experts.iter().collect();
            let tc = gate_config(&cfg.gating, cfg.seed, &manifest.domain_id);
            let (mut gate, _) = train_gating(&refs, &data, &cfg.gate, &tc)?;
            gate.meta.config = Some(cfg.snapshot());
            save_gating(&gate, &a.out)
        }
        Command::SelectTopk(a) => select_topk(&a, &cfg),
        Command::Infer(a) => {
            let ensemble = load_ensemble(&a.ensemble)?;
            let samples = load_input(&a.input)?;
            let results = samples
                .iter()
                .map(|(id, image)| {
                    Ok(ImageDetections {
                        image: id.clone(),
                        detections: infer(&ensemble, image, &cfg.inference)?.iter().map(DetectionRecord::from).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_json(
                &a.out,
                &InferReport {
                    format_version: FORMAT_VERSION,
                    seed: cfg.seed,
                    config: cfg.snapshot(),
                    results,
                },
            )
        }
        Command::Eval(a) => {
            let ensemble = load_ensemble(&a.ensemble)?;
            let (_, data) = load_dataset(&a.data)?;
            let dets = data
                .iter()
                .map(|s| infer(&ensemble, &s.image, &cfg.inference))
                .collect::<Result<Vec<_>>>()?;
            let summary = mean_average_precision(
                &dets,
                &ground_truth(&data),
                ensemble.experts[0].num_classes(),
                cfg.inference.eval_iou,
            );
            write_json(
                &a.out,
                &EvalReport {
                    format_version: FORMAT_VERSION,
                    method: if a.ensemble.gate.is_some() { "gating" } else { "average" }.into(),
                    seed: cfg.seed,
                    experts: ensemble.experts.iter().map(|e| e.meta.expert_id.clone()).collect(),
                    per_class: summary.per_class,
                    map: summary.map,
                    num_detections: dets.iter().map(Vec::len).sum(),
                    config: cfg.snapshot(),
                },
            )
        }
        Command::Experiment(a) => {
            let artifacts = run_experiment(&a.name, &cfg)?;
            for art in artifacts {
                container::write_file(&a.out.join(&art.name), art.contents.as_bytes())?;
            }
            Ok(())
        }
    }
}

fn gen_data(a: &GenDataArgs, cfg: &RunConfig) -> Result<()> {
    let size = cfg.detector.image_size;
    let mut jobs: Vec<(DomainSpec, &str, usize)> = Vec::new();
    let role;
    if let Some(path) = &a.spec {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: DomainSpec = toml::from_str(&text).map_err(|e| Error::format(path, e.message().to_string()))?;
        role = a.role.clone();
        jobs.push((spec, role.as_str(), a.count));
    } else {
        let d = make_experiment_domains(&cfg.preset, cfg.seed)?;
        let l = &d.layout;
        for s in &d.sources {
            jobs.push((s.clone(), "train", l.source_train));
            jobs.push((s.clone(), "heldout", l.source_heldout));
        }
        for t in &d.targets {
            jobs.push((t.target.clone(), "test", l.target_test));
            jobs.push((t.train.clone(), "train", t.train_size));
        }
    }
    for (spec, role, n) in jobs {
        let seed = data_seed(cfg.seed, &spec.domain_id, role);
        let samples = generate_domain_dataset(&spec, n, seed, (size[0], size[1]))?;
        let path = a.out.join(&spec.domain_id).join(role).join("manifest.json");
        save_dataset(&samples, &spec, seed, &path, Some(cfg.snapshot()))?;
    }
    Ok(())
}

fn select_topk(a: &SelectTopkArgs, cfg: &RunConfig) -> Result<()> {
    let experts = load_experts(&a.models)?;
    let (manifest, data) = load_dataset(&a.data)?;
    let refs: Vec<&ExpertModel> = experts.iter().collect();
    let manual = match &a.manual_ids {
        Some(ids) => Some(
            ids.iter()
                .map(|id| {
                    experts
                        .iter()
                        .position(|e| &e.meta.expert_id == id)
                        .ok_or_else(|| Error::config("manual_ids", format!("no loaded expert has id `{id}`")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let k = cfg.top_k.unwrap_or(2).min(experts.len());
    let tc = gate_config(&cfg.gating, cfg.seed, &manifest.domain_id);
    let mut outcome = retrain_top_k(&refs, &data, k, manual.as_deref(), &cfg.gate, &tc)?;
    outcome.gate.meta.config = Some(cfg.snapshot());
    save_gating(&outcome.gate, &a.out.join("gate.gfgt"))?;
    let report = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "target": manifest.domain_id,
        "k": outcome.selected.len(),
        "ranking": outcome.ranking.iter().map(|r| serde_json::json!({
            "expert_id": r.expert_id,
            "mean_weight_pct": r.percent(),
        })).collect::<Vec<_>>(),
        "selected": outcome.selected.iter().map(|&i| experts[i].meta.expert_id.clone()).collect::<Vec<_>>(),
        "config": cfg.snapshot(),
    });
    write_json(&a.out.join("ranking.json"), &report)
}

fn load_experts(paths: &[PathBuf]) -> Result<Vec<ExpertModel>> {
    paths.iter().map(|p| load_expert(p)).collect()
}

fn load_ensemble(a: &EnsembleArgs) -> Result<Ensemble> {
    let experts = load_experts(&a.models)?;
    match &a.gate {
        Some(path) => Ensemble::new(experts, load_gating(path)?),
        None => Ensemble::uniform(experts),
    }
}

/// `(image id, image)` pairs from a PNG file or a dataset manifest.
fn load_input(path: &Path) -> Result<Vec<(String, crate::tensor::Tensor)>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(id, load_png(path)?)]);
    }
    let (_, data) = load_dataset(path)?;
    Ok(data
        .into_iter()
        .map(|SceneSample { sample_id, image, .. }| (sample_id, image))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    container::write_file(path, text.as_bytes())
}

#[derive(Debug, Serialize)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f32,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            bbox: d.bbox.to_array(),
            class_id: d.class_id,
            score: d.score,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ImageDetections {
    pub image: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Serialize)]
struct InferReport {
    format_version: u32,
    seed: u64,
    config: serde_json::Value,
    results: Vec<ImageDetections>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub method: String,
    pub seed: u64,
    pub experts: Vec<String>,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub num_detections: usize,
    pub config: serde_json::Value,
}

/// One-line machine-readable error record.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[expert]\nepochs = 4\n").unwrap();
        let cli = Cli::parse_from([
            "gatefuse",
            "--config",
            path.to_str().unwrap(),
            "train-expert",
            "--data",
            "d",
            "--out",
            "o",
            "--epochs",
            "9",
        ]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.expert.epochs, 9);
        let cli = Cli::parse_from(["gatefuse", "--seed", "8", "--config", path.to_str().unwrap(), "eval", "--models", "a", "--data", "d", "--out", "o"]);
        assert_eq!(resolve_config(&cli).unwrap().seed, 8);
    }

    #[test]
    fn error_line_is_single_line_json() {
        let line = error_line(&Error::io("x/y.png", std::io::Error::from(std::io::ErrorKind::NotFound)));
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "io");
        assert_eq!(v["exit_code"], 2);
        assert!(v["message"].as_str().unwrap().contains("x/y.png"));
    }
}
