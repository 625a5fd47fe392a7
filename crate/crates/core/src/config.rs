//! Declarative experiment configuration: one JSON document, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::denoiser::ModelConfig;
use crate::error::{LabError, Result};
use crate::eval::{ClassifierConfig, EvalProtocol};
use crate::prompts::AnchorTable;
use crate::train::TrainConfig;
use crate::unlearner::UnlearnConfig;

/// Axes of the anchor study and the S grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Word anchors for the similarity axis; empty means the concept's four table analogs.
    pub word_anchors: Vec<String>,
    pub prefix_lengths: Vec<usize>,
    /// Anchor word placed after the shared prefix; empty means the concept's parent.
    pub prefix_word: String,
    pub s_grid: Vec<usize>,
    /// Independent replications of each sweep cell.
    pub replications: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            word_anchors: Vec::new(),
            prefix_lengths: vec![0, 3, 8],
            prefix_word: String::new(),
            s_grid: vec![20, 30, 40, 50],
            replications: 3,
        }
    }
}

/// Where shared artifacts live, relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub base: PathBuf,
    pub classifier: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            base: "runs/base".into(),
            classifier: "runs/classifier".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub anchors: AnchorTable,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            unlearn: UnlearnConfig::default(),
            eval: EvalProtocol::default(),
            sweep: SweepConfig::default(),
            anchors: AnchorTable::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl LabConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LabError::Config(format!(
                "config file {} not found",
                path.display()
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.unlearn.validate()?;
        self.eval.validate()?;
        if self.sweep.replications == 0 {
            return Err(LabError::Config(
                "sweep.replications must be at least 1".into(),
            ));
        }
        if self.sweep.s_grid.iter().any(|&s| s == 0) {
            return Err(LabError::Config(
                "sweep.s_grid entries must be at least 1".into(),
            ));
        }
        self.anchors.get(&self.unlearn.concept)?;
        Ok(())
    }
}
