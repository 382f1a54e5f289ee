//! Experiment configuration, read from a single JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gis::{GisConfig, SignPolicy};
use crate::harness::buffer::BufferPolicy;
use crate::harness::synth::SynthSpec;
use crate::model::StructureLossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Csv {
        path: PathBuf,
        classes_per_step: usize,
        test_ratio: f64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SynthSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Scale of the output layer's initial weights.
    pub output_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 32,
            output_gain: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub sizes: Vec<usize>,
    pub signs: SignPolicy,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4, 8, 16],
            signs: SignPolicy::Split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Buffer mini-batch size for the pairwise structure losses.
    pub pair_batch: usize,
    pub class_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.005,
            batch_size: 64,
            pair_batch: 64,
            class_init_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Row label in aggregate reports.
    pub name: Option<String>,
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelConfig,
    pub pool: PoolConfig,
    pub gis: GisConfig,
    pub structure: StructureLossConfig,
    pub train: TrainConfig,
    pub buffer: BufferPolicy,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Layer sizes from input to feature dimension.
    pub fn backbone_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.model.hidden);
        sizes.push(self.model.feature_dim);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic(spec) => spec.validate()?,
            DataSource::Csv {
                path,
                classes_per_step,
                test_ratio,
            } => {
                if !path.exists() {
                    return Err(Error::config(format!("data file {} does not exist", path.display())));
                }
                if *classes_per_step == 0 || !(0.0..1.0).contains(test_ratio) {
                    return Err(Error::config("csv needs classes_per_step ≥ 1 and test_ratio in [0, 1)"));
                }
            }
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !(self.model.output_gain.is_finite() && self.model.output_gain > 0.0) {
            return Err(Error::config("model.output_gain must be positive"));
        }
        if let Some(s) = self.pool.sizes.iter().find(|&&s| s == 0 || !self.model.feature_dim.is_multiple_of(s)) {
            return Err(Error::config(format!(
                "pool size {s} does not divide feature_dim {}",
                self.model.feature_dim
            )));
        }
        if self.pool.sizes.is_empty() {
            return Err(Error::config("pool.sizes must not be empty"));
        }
        self.gis.validate()?;
        self.structure.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.pair_batch < 2 {
            return Err(Error::config("train.batch_size must be ≥ 1 and train.pair_batch ≥ 2"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) || !(t.class_init_std.is_finite() && t.class_init_std > 0.0) {
            return Err(Error::config("train.lr and train.class_init_std must be positive"));
        }
        match self.buffer {
            BufferPolicy::PerClass(0) | BufferPolicy::Budget(0) => Err(Error::config("buffer capacity must be positive")),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.backbone_sizes(16), vec![16, 64, 32]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"sede": 1}"#), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn ranges_validated() {
        assert!(ExperimentConfig::from_json(r#"{"pool": {"sizes": [5]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"structure": {"lambda_global": -1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"buffer": {"budget": 0}}"#).is_err());
        let missing = r#"{"data": {"csv": {"path": "/nonexistent/x.csv", "classes_per_step": 2, "test_ratio": 0.2}}}"#;
        assert!(ExperimentConfig::from_json(missing).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 42;
        cfg.buffer = BufferPolicy::Budget(200);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
