//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::DecodeOptions;
use crate::network::ModelConfig;
use crate::prompt::FoldMode;
use crate::train::{DatasetSpec, TrainConfig};

fn default_threshold() -> f32 {
    0.3
}

fn default_fold() -> FoldMode {
    FoldMode::Stacked
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    #[default]
    Text,
    Visual,
    #[serde(rename = "promptfree")]
    PromptFree,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "visual" => Ok(Self::Visual),
            "promptfree" | "prompt-free" => Ok(Self::PromptFree),
            other => Err(Error::Usage(format!("unknown prompt mode {other:?} (text|visual|promptfree)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    #[serde(default = "default_threshold")]
    pub score_threshold: f32,
    /// Objectness threshold; the checkpoint's recommendation when absent.
    #[serde(default)]
    pub delta: Option<f32>,
    #[serde(default)]
    pub mode: PromptMode,
    #[serde(default = "default_fold")]
    pub fold_mode: FoldMode,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: default_threshold(),
            delta: None,
            mode: PromptMode::Text,
            fold_mode: default_fold(),
        }
    }
}

impl InferConfig {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions::threshold(self.score_threshold)
    }
}

/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    /// Category names of the text stage, one per line.
    pub names: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Checkpoint to start from.
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub infer: InferConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.train_data, &mut p.val_data, &mut p.names, &mut p.vocab, &mut p.init] {
            resolve(base, slot);
        }
        Ok(cfg)
    }
}

/// Dataset spec from TOML, or JSON when the file ends in `.json`.
pub fn load_dataset_spec(path: &Path) -> Result<DatasetSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: DatasetSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    spec.validate()?;
    Ok(spec)
}
