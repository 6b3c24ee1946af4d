//! Run configuration: one JSON document, overridden field-by-field by flags.

use std::path::{Path, PathBuf};

use hccgraph::dataset::SynthConfig;
use hccgraph::encoder::EncoderConfig;
use hccgraph::evaluation::{CvConfig, FeatureSource, RfBaseline};
use hccgraph::gcn::TrainConfig;
use hccgraph::graph::GraphConfig;
use hccgraph::seed;
use hccgraph::uncertainty::{validate_threshold, DEFAULT_MC_SAMPLES, DEFAULT_THRESHOLDS};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cohort: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Feature source used inside cross-validation folds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CvFeatures {
    /// Autoencoder when every patient has a volume, stored features otherwise.
    #[default]
    Auto,
    Autoencoder,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub k_sigma: f64,
    pub encoder: EncoderConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub k_folds: usize,
    pub n_mc_samples: usize,
    pub triage_thresholds: Vec<f64>,
    pub cv_features: CvFeatures,
    pub rf: RfBaseline,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            k_sigma: 0.0,
            encoder: EncoderConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            k_folds: 10,
            n_mc_samples: DEFAULT_MC_SAMPLES,
            triage_thresholds: DEFAULT_THRESHOLDS.to_vec(),
            cv_features: CvFeatures::Auto,
            rf: RfBaseline::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for &t in &self.triage_thresholds {
            validate_threshold(t).map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.n_mc_samples == 0 {
            return Err(CliError::Config("n_mc_samples must be >= 1".into()));
        }
        if self.k_folds < 2 {
            return Err(CliError::Config("k_folds must be >= 2".into()));
        }
        Ok(())
    }

    /// Seed of a named stage. Every stage seed is a hash of the global seed
    /// and the stage name, so stages can be rerun on their own.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage, 0)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.stage_seed("synth"), ..self.synth.clone() }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { seed: self.stage_seed("encode"), ..self.encoder.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.stage_seed("train"), ..self.train.clone() }
    }

    pub fn mc_seed(&self) -> u64 {
        self.stage_seed("predict")
    }

    pub fn cv_config(&self, all_volumes: bool) -> CvConfig {
        let features = match (self.cv_features, all_volumes) {
            (CvFeatures::Precomputed, _) | (CvFeatures::Auto, false) => FeatureSource::Precomputed,
            _ => FeatureSource::Autoencoder(self.encoder.clone()),
        };
        CvConfig {
            k: self.k_folds,
            n_mc: self.n_mc_samples,
            seed: self.stage_seed("crossval"),
            thresholds: self.triage_thresholds.clone(),
            features,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "train": {"epochs": 5}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.hidden_dim, 16);
        assert_eq!(cfg.triage_thresholds, vec![0.85, 0.90, 0.95]);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig { seed: 3, ..RunConfig::default() };
        assert_ne!(cfg.stage_seed("synth"), cfg.stage_seed("train"));
        assert_eq!(cfg.synth_config().seed, cfg.stage_seed("synth"));
    }

    #[test]
    fn thresholds_validated() {
        let cfg = RunConfig { triage_thresholds: vec![0.5], ..RunConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
