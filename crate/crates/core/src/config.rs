//! Pipeline configuration: JSON file with strict keys, paper-setting
//! defaults for every unspecified field, and CLI flag overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{Architecture, TrainConfig};
use crate::error::{Error, Result};
use crate::imageops::{BasicAugmentConfig, NormalizationSpec};
use crate::splice::AugmentConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub splice: AugmentConfig,
    pub basic: BasicAugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    /// Apply the augment stack to validation batches as well.
    pub augment_validation: bool,
    /// Trusted regions with a bounding box smaller than this many pixels are
    /// discarded.
    pub min_region_area: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage1_lr: 0.0004,
            stage2_lr: 0.0000001,
            batch_size: 200,
            epochs_per_round: 100,
            augment_validation: true,
            min_region_area: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub run_dir: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

/// Fully resolved pipeline settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub model: Architecture,
    pub normalization: NormalizationSpec,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.splice.validate()?;
        self.augment.basic.validate()?;
        self.model.validate()?;
        self.normalization.validate()?;
        for (name, lr) in [("stage1_lr", self.train.stage1_lr), ("stage2_lr", self.train.stage2_lr)]
        {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train.epochs_per_round == 0 {
            return Err(Error::Config("epochs_per_round must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!(
                "eval threshold must be in [0, 1], got {}",
                self.eval.threshold
            )));
        }
        Ok(())
    }

    /// SGD settings for the given stage (1 = splice-only, 2 = region
    /// rounds).
    pub fn stage_train_config(&self, stage: u8) -> TrainConfig {
        TrainConfig {
            learning_rate: if stage <= 1 {
                self.train.stage1_lr
            } else {
                self.train.stage2_lr
            },
            batch_size: self.train.batch_size,
            epochs_per_round: self.train.epochs_per_round,
            seed: self.seed,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    /// Echoes the resolved configuration into the run directory for
    /// provenance.
    pub fn write_resolved(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join("config.resolved.json");
        std::fs::write(&path, self.to_json_pretty()).map_err(|e| Error::io(&path, e))
    }
}

/// Loads a config file, or the full defaults when no path is given. Unknown
/// keys and out-of-range values are errors.
pub fn parse_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        None => PipelineConfig::default(),
        Some(path) => {
            let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&raw)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_reference_settings() {
        let cfg = parse_config(None).unwrap();
        assert_eq!(cfg.augment.splice.theta, 0.5);
        assert_eq!(cfg.augment.splice.canvas_size, 224);
        assert_eq!(cfg.augment.splice.region_scale_interval, (100, 224));
        assert_eq!(cfg.augment.basic.p_hflip, 0.5);
        assert_eq!(cfg.augment.basic.p_gray, 0.01);
        assert_eq!(cfg.augment.basic.p_vflip, 0.02);
        assert_eq!(cfg.augment.basic.p_rotate, 0.3);
        assert_eq!(cfg.augment.basic.p_brightness, 0.5);
        assert_eq!(cfg.augment.basic.p_contrast, 0.5);
        assert_eq!(cfg.augment.basic.p_saturation, 1.0);
        assert_eq!(cfg.augment.basic.saturation_range, (0.2, 1.6));
        assert_eq!(cfg.augment.basic.p_hue, 0.1);
        assert_eq!(cfg.train.stage1_lr, 0.0004);
        assert_eq!(cfg.train.stage2_lr, 0.0000001);
        assert_eq!(cfg.train.batch_size, 200);
        assert_eq!(cfg.train.epochs_per_round, 100);
        assert_eq!(cfg.eval.threshold, 0.5);
        assert_eq!(cfg.normalization.mean, [0.5; 3]);
        assert_eq!(cfg.normalization.scale, [0.5; 3]);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn out_of_range_theta_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"augment": {"splice": {"theta": 1.5}}}"#).unwrap();
        let err = parse_config(Some(&path)).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
    }

    #[test]
    fn unknown_key_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"augmnet": {}}"#).unwrap();
        assert!(parse_config(Some(&path)).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"seed": 9, "train": {"batch_size": 16}, "model": {"input_size": 32}}"#,
        )
        .unwrap();
        let cfg = parse_config(Some(&path)).unwrap();
        let emitted = dir.path().join("resolved.json");
        std::fs::write(&emitted, cfg.to_json_pretty()).unwrap();
        let again = parse_config(Some(&emitted)).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.seed, 9);
        assert_eq!(again.train.batch_size, 16);
        assert_eq!(again.model.input_size, 32);
        // Unspecified fields fell back to defaults.
        assert_eq!(again.train.epochs_per_round, 100);
    }

    #[test]
    fn stage_learning_rates() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.stage_train_config(1).learning_rate, 0.0004);
        assert_eq!(cfg.stage_train_config(2).learning_rate, 0.0000001);
    }
}
