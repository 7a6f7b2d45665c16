//! The run configuration: one JSON file, flags layered on top, and the
//! merged result echoed next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use grasame::decode::DecodeConfig;
use grasame::ingest::DEFAULT_PROMPT;
use grasame::model::ModelConfig;
use grasame::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// JSON-lines training data. No default; required by `train` and
    /// `sweep-lambda` unless given with `--data`.
    pub train_data: Option<PathBuf>,
    /// Validation data for checkpoint selection. Defaults to the training
    /// set.
    pub valid_data: Option<PathBuf>,
    /// Where checkpoints, logs and the merged config go. Default `run`.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_data: None,
            valid_data: None,
            output_dir: PathBuf::from("run"),
        }
    }
}

/// Everything a run depends on. Defaults are those of the owning library
/// types; `prompt` defaults to the T5-style task prefix and `min_count` to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub paths: Paths,
    pub prompt: String,
    /// Minimum corpus frequency for a vocabulary entry.
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            paths: Paths::default(),
            prompt: DEFAULT_PROMPT.to_string(),
            min_count: 1,
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn bidirectional(&self) -> bool {
        !self.train.unidirectional_edges
    }
}
