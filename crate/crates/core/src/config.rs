//! Run configuration with defaults for every stage.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::GmmOptions;
use crate::error::{Error, Result};
use crate::forests::ForestConfig;
use crate::graph::{AutoencoderConfig, RefineConfig};
use crate::neuralkernel::{CnnSeqConfig, FfnnConfig, TrainOptions, TransformerConfig};
use crate::phasemap::PhaseMapConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Synthetic rows are generated from each training fold only.
    #[default]
    InFold,
    /// Synthetic rows are generated once before splitting.
    Global,
}

impl AugmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMode::InFold => "in_fold",
            AugmentMode::Global => "global",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            lambda: 1.0,
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    pub output_dir: PathBuf,
    pub model_dir: PathBuf,
    pub seed: u64,
    pub synthetic_count: usize,
    pub augmentation: AugmentMode,
    pub folds: usize,
    pub k_neighbors: usize,
    /// Share of each training fold held out to fit the calibrators.
    pub calibration_holdout: f64,
    pub calibration_bins: usize,
    pub gmm: GmmOptions,
    pub phase: PhaseMapConfig,
    pub autoencoder: AutoencoderConfig,
    pub refine: RefineConfig,
    pub forest: ForestConfig,
    pub transformer: TransformerConfig,
    pub cnn: CnnSeqConfig,
    pub ffnn: FfnnConfig,
    pub train: TrainOptions,
    pub meta: MetaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data/pima.csv"),
            output_dir: PathBuf::from("outputs"),
            model_dir: PathBuf::from("models"),
            seed: 42,
            synthetic_count: 2000,
            augmentation: AugmentMode::InFold,
            folds: 5,
            k_neighbors: 5,
            calibration_holdout: 0.2,
            calibration_bins: 10,
            gmm: GmmOptions::default(),
            phase: PhaseMapConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            refine: RefineConfig::default(),
            forest: ForestConfig::default(),
            transformer: TransformerConfig::default(),
            cnn: CnnSeqConfig::default(),
            ffnn: FfnnConfig::default(),
            train: TrainOptions::default(),
            meta: MetaConfig::default(),
        }
    }
}

impl RunConfig {
    /// Two folds, two epochs, no synthetic rows.
    pub fn smoke() -> Self {
        let mut config = RunConfig {
            folds: 2,
            synthetic_count: 0,
            ..RunConfig::default()
        };
        config.set_epochs(2);
        config
    }

    /// Set the epoch count of every gradient-trained network stage.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.phase.epochs = epochs;
        self.autoencoder.epochs = epochs;
        self.train.epochs = epochs;
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Parameter(msg));
        if self.folds < 2 {
            return fail(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.k_neighbors == 0 {
            return fail("k_neighbors must be at least 1".into());
        }
        if !(self.calibration_holdout > 0.0 && self.calibration_holdout < 1.0) {
            return fail(format!(
                "calibration_holdout must lie in (0, 1), got {}",
                self.calibration_holdout
            ));
        }
        if self.calibration_bins < 2 {
            return fail("calibration_bins must be at least 2".into());
        }
        if self.gmm.components == 0 {
            return fail("gmm.components must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if self.forest.trees == 0 {
            return fail("forest.trees must be at least 1".into());
        }
        if self.refine.iterations == 0 || self.refine.rebuild_every == 0 {
            return fail("refine.iterations and refine.rebuild_every must be at least 1".into());
        }
        self.transformer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.folds, c.k_neighbors, c.synthetic_count), (5, 5, 2000));
        assert_eq!(c.gmm.components, 5);
        assert_eq!(c.augmentation, AugmentMode::InFold);
        c.validate().unwrap();
    }

    #[test]
    fn smoke_profile() {
        let c = RunConfig::smoke();
        assert_eq!((c.folds, c.synthetic_count, c.train.epochs), (2, 0, 2));
        assert_eq!(c.autoencoder.epochs, 2);
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(
            (partial.seed, partial.train.epochs, partial.train.batch_size),
            (7, 3, 32)
        );
    }
}
