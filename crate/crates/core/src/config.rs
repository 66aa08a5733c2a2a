//! Run configuration: one JSON document with optional `model`, `train` and
//! `data` sections. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{generate_dataset, read_dataset, Dataset, FeatureSchema, GroundTruth, GroundTruthSpec};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Mixed into the data seed to derive the test sample's seed.
const TEST_SEED_SALT: u64 = 0x5445_5354_0000_0001;

fn default_train_rows() -> usize {
    100_000
}
fn default_test_rows() -> usize {
    20_000
}

/// Where training and test examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "FeatureSchema::desk_default")]
    pub schema: FeatureSchema,
    #[serde(default = "GroundTruthSpec::desk_default")]
    pub ground_truth: GroundTruthSpec,
    #[serde(default = "default_train_rows")]
    pub train_rows: usize,
    #[serde(default = "default_test_rows")]
    pub test_rows: usize,
    /// Seed of the sampled rows; the test sample uses a derived seed.
    #[serde(default)]
    pub seed: u64,
    /// Dataset files (with sidecars) used instead of generating rows.
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            schema: FeatureSchema::desk_default(),
            ground_truth: GroundTruthSpec::desk_default(),
            train_rows: default_train_rows(),
            test_rows: default_test_rows(),
            seed: 0,
            train_path: None,
            test_path: None,
        }
    }
}

/// Train and test examples plus the generator's Bayes AUC.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub schema: FeatureSchema,
    pub train: Dataset,
    pub test: Dataset,
    pub bayes_auc: f64,
}

impl DataConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.schema.validate() {
            v.push(e.to_string());
        }
        if let Err(e) = self.ground_truth.validate(&self.schema) {
            v.push(e.to_string());
        }
        if self.train_rows == 0 || self.test_rows == 0 {
            v.push("train_rows and test_rows must be at least 1".into());
        }
        if self.train_path.is_some() != self.test_path.is_some() {
            v.push("train_path and test_path must be given together".into());
        }
        v
    }

    pub fn test_seed(&self) -> u64 {
        self.seed ^ TEST_SEED_SALT
    }

    /// Reads the configured files, or samples both splits from the planted
    /// model.
    pub fn load(&self) -> Result<DataSplit> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(Error::violations(v));
        }
        if let (Some(train_path), Some(test_path)) = (&self.train_path, &self.test_path) {
            let (train, meta) = read_dataset(train_path)?;
            let (test, test_meta) = read_dataset(test_path)?;
            if test_meta.schema != meta.schema {
                return Err(Error::Config("train and test files use different schemas".into()));
            }
            return Ok(DataSplit { schema: meta.schema, train, test, bayes_auc: meta.bayes_auc });
        }
        let (train, meta) = generate_dataset(&self.schema, &self.ground_truth, self.train_rows, self.seed)?;
        let test = GroundTruth::new(&self.schema, &self.ground_truth)?.sample(&self.schema, self.test_rows, self.test_seed());
        Ok(DataSplit { schema: self.schema.clone(), train, test, bayes_auc: meta.bayes_auc })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
}

impl RunConfig {
    /// Parses a config document; malformed JSON and unknown keys are
    /// configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| Error::Config("config has no `model` section".into()))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| Error::Config("config has no `train` section".into()))
    }

    /// The `data` section, or the default desk data when absent.
    pub fn data(&self) -> DataConfig {
        self.data.clone().unwrap_or_default()
    }

    /// Replaces every seed in the document.
    pub fn apply_seed(&mut self, seed: u64) {
        if let Some(m) = &mut self.model {
            m.seed = seed;
        }
        if let Some(t) = &mut self.train {
            t.seed = seed;
        }
        self.data.get_or_insert_with(DataConfig::default).seed = seed;
    }

    /// Every violated constraint of the sections present.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(m) = &self.model {
            v.extend(m.violations());
        }
        if let Some(t) = &self.train {
            v.extend(t.violations());
        }
        if let Some(d) = &self.data {
            v.extend(d.violations());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::violations(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"modle": {}}"#), Err(Error::Config(_))));
        let err = RunConfig::from_json(r#"{"train": {"total_steps": 5, "lr": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
    }

    #[test]
    fn sections_are_optional() {
        let cfg = RunConfig::from_json(r#"{"train": {"total_steps": 5}}"#).unwrap();
        assert!(cfg.model().is_err());
        assert_eq!(cfg.train().unwrap().total_steps, 5);
        assert_eq!(cfg.data(), DataConfig::default());
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let mut cfg = RunConfig {
            model: Some(ModelConfig::small_zenith()),
            train: Some(TrainConfig::new(10)),
            data: None,
        };
        cfg.apply_seed(42);
        assert_eq!(cfg.model.unwrap().seed, 42);
        assert_eq!(cfg.train.unwrap().seed, 42);
        assert_eq!(cfg.data.unwrap().seed, 42);
    }

    #[test]
    fn violations_name_the_constraint() {
        let model = ModelConfig { heads: 3, ..ModelConfig::small_zenith_pp() };
        let cfg = RunConfig { model: Some(model), ..RunConfig::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("H | D"));
    }

    #[test]
    fn generated_splits_are_disjoint_samples() {
        let data = DataConfig { train_rows: 50, test_rows: 30, ..DataConfig::default() };
        let split = data.load().unwrap();
        assert_eq!((split.train.len(), split.test.len()), (50, 30));
        assert_ne!(split.train.range(0, 30).labels, split.test.labels);
        assert!(split.bayes_auc > 0.5);
        let again = data.load().unwrap();
        assert_eq!(again.train, split.train);
    }
}
