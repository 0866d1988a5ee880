//! Run configuration shared by the command line and the experiment runners.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorArch, TrainConfig};
use crate::error::{Error, Result};
use crate::gating::GateArch;
use crate::infer::InferenceConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    /// Domain preset for data generation and experiments.
    pub preset: String,
    /// Seeds over which experiment reports take medians.
    pub seeds: Vec<u64>,
    /// Experts kept by top-k selection; the preset default when absent.
    pub top_k: Option<usize>,
    /// Expert prefix sizes for the incremental experiment; `1..=n` when absent.
    pub model_counts: Option<Vec<usize>>,
    pub detector: DetectorArch,
    pub expert: TrainConfig,
    pub fine_tune: TrainConfig,
    pub gate: GateArch,
    pub gating: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: "small5".into(),
            seeds: vec![1, 2, 3],
            top_k: None,
            model_counts: None,
            detector: DetectorArch::default(),
            expert: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            fine_tune: TrainConfig {
                epochs: 10,
                learning_rate: 0.005,
                ..TrainConfig::default()
            },
            gate: GateArch::default(),
            gating: TrainConfig {
                epochs: 30,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::format(origin, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        for (name, t) in [("expert", &self.expert), ("fine_tune", &self.fine_tune), ("gating", &self.gating)] {
            t.validate().map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("{name}.{field}"), reason),
                other => other,
            })?;
        }
        self.inference.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.top_k == Some(0) {
            return Err(Error::config("top_k", "must be positive"));
        }
        if let Some(counts) = &self.model_counts {
            if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("model_counts", "must be a strictly increasing list of positive counts"));
            }
        }
        Ok(())
    }

    /// JSON snapshot embedded in written artifacts.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("c.toml")).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 5\n[expert]\nepochs = 3\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.expert.epochs, 3);
        assert_eq!(cfg.expert.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml("sed = 5\n", Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("sed"), "{err}");
        assert!(RunConfig::from_toml("[expert]\nepoch = 1\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn bad_value_names_field() {
        let err = RunConfig::from_toml("[gating]\nfocal_gamma = -1.0\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("gating.focal_gamma"), "{err}");
    }
}
