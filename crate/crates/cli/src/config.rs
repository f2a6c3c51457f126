//! Run configuration: one TOML file, every field defaulted.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kgs4::corpus::SplitScheme;
use kgs4::network::ModelConfig;
use kgs4::preprocess::PreprocessConfig;
use kgs4::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Default,
    Desk,
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Pre-training chunks, spread round-robin over `corpus_subjects`.
    pub n_chunks: usize,
    pub corpus_subjects: usize,
    pub task_subjects: usize,
    pub trials_per_class: usize,
    /// Permute task labels so they carry no signal.
    pub shuffle_labels: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_chunks: 200, corpus_subjects: 10, task_subjects: 6, trials_per_class: 8, shuffle_labels: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    /// Annotation labels that form the classes, in class-index order.
    pub classes: Vec<String>,
    pub split: SplitScheme,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { name: "task".into(), classes: vec!["alpha".into(), "beta".into()], split: SplitScheme::Loso }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the run directory under the output root.
    pub experiment_id: Option<String>,
    pub preset: Preset,
    /// Field overrides applied on top of the preset, e.g. `d_model = 64`.
    pub model: toml::Table,
    /// Channels kept by `preprocess`; empty keeps every channel.
    pub channels: Vec<String>,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub task: TaskConfig,
}

/// A parsed configuration with its provenance.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub path: Option<PathBuf>,
    /// SHA-256 of the file contents, or of the empty string without a file.
    pub sha256: String,
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let config = parse(&text)?;
    let model = config.model_config()?;
    Ok(Loaded { config, model, path: path.map(Path::to_path_buf), sha256: hex::encode(Sha256::digest(text.as_bytes())) })
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let config: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| UsageError(format!("config field `{}`: {}", e.path(), e.inner().message().trim())))?;
    config.train.validate().map_err(|e| UsageError(format!("config section `train`: {e}")))?;
    config.preprocess.validate().map_err(|e| UsageError(format!("config section `preprocess`: {e}")))?;
    Ok(config)
}

impl RunConfig {
    /// The preset with `[model]` overrides merged in, validated.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut value = toml::Value::try_from(self.preset.model()).context("serializing model preset")?;
        merge(&mut value, toml::Value::Table(self.model.clone()));
        let model: ModelConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| UsageError(format!("config field `model.{}`: {}", e.path(), e.inner())))?;
        model.validate().map_err(|e| UsageError(format!("config section `model`: {e}")))?;
        Ok(model)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
