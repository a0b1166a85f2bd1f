//! Declarative run configuration read from TOML.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dpar::corpus::SyntheticSpec;
use dpar::entropy::{EntropyConfig, EntropyTrainConfig};
use dpar::model::ModelConfig;
use dpar::runtime::{SamplingConfig, TrainConfig};
use serde::{Deserialize, Serialize};

const SECTIONS: [&str; 6] = [
    "corpus",
    "entropy",
    "entropy_train",
    "model",
    "train",
    "sampling",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub num_regions: usize,
    pub noise_rate: f64,
    pub num_classes: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            vocab_size: 64,
            num_regions: 4,
            noise_rate: 0.05,
            num_classes: 10,
            count: 256,
            seed: 0,
        }
    }
}

impl CorpusSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            height: self.height,
            width: self.width,
            vocab_size: self.vocab_size,
            num_regions: self.num_regions,
            noise_rate: self.noise_rate,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub entropy: EntropyConfig,
    pub entropy_train: EntropyTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
}

impl RunConfig {
    /// Parse a config file. A file without any section headers is taken
    /// to be the body of `bare` alone.
    pub fn load(path: &Path, bare: &str) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, bare).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str, bare: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        if !table.is_empty() && !SECTIONS.iter().any(|s| table.contains_key(*s)) {
            let mut wrapped = toml::Table::new();
            wrapped.insert(bare.to_string(), toml::Value::Table(table));
            table = wrapped;
        }
        Ok(table.try_into()?)
    }

    pub fn load_or_default(path: Option<&Path>, bare: &str) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), |p| Self::load(p, bare))
    }
}
