//! Run configuration. Every section is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use elastic_nas::archspace::SearchSpaceSpec;
use elastic_nas::elastic_net::TrainConfig;
use elastic_nas::linas::SearchConfig;
use elastic_nas::{NasError, Result};
use serde::{Deserialize, Serialize};

/// A preset name or an explicit space document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceSource {
    Preset(String),
    Explicit(SearchSpaceSpec),
}

impl Default for SpaceSource {
    fn default() -> Self {
        SpaceSource::Preset("toy".into())
    }
}

impl SpaceSource {
    pub fn resolve(&self) -> Result<SearchSpaceSpec> {
        match self {
            SpaceSource::Preset(name) => SearchSpaceSpec::preset(name),
            SpaceSource::Explicit(s) => {
                s.validate()?;
                Ok(s.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub suite_seed: u64,
    pub n_items: usize,
    /// Training corpus.
    pub corpus_seed: u64,
    pub corpus_tokens: usize,
    /// Coefficient seed of the surrogate evaluator.
    pub surrogate_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            suite_seed: 1,
            n_items: 500,
            corpus_seed: 0,
            corpus_tokens: 1_000_000,
            surrogate_seed: 42,
        }
    }
}

/// Default output locations; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub space: SpaceSource,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.space.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NasError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text).map_err(|e| NasError::InvalidInput(format!("{}: {e}", path.display())))
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
