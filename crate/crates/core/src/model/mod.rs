//! The three-stage patch model: a token-level encoder pooled into patches, a
//! global transformer over patches, and a token-level decoder fed by copies
//! of the global outputs.

mod batch;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchifier::PatchifierConfig;
use crate::positional::EmbeddingVariant;

pub use batch::{pack_batch, training_input, PackedBatch, SequenceInput};
pub use network::{
    packed_training_forward, training_forward, DparModel, PackedLosses, StageOutputs,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub global_layers: usize,
    pub decoder_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub patchifier: PatchifierConfig,
    #[serde(default)]
    pub embedding_variant: EmbeddingVariant,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 1,
            global_layers: 6,
            decoder_layers: 3,
            hidden: 128,
            heads: 4,
            vocab_size: 64,
            num_classes: 10,
            patchifier: PatchifierConfig::new(1.0, 4, 16),
            embedding_variant: EmbeddingVariant::Dynamic,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(16) {
            return Err(Error::Config(format!(
                "head dim {} must be divisible by 16",
                self.head_dim()
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config(
                "encoder and decoder need at least one layer".into(),
            ));
        }
        if self.vocab_size == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "vocab_size and num_classes must be positive".into(),
            ));
        }
        self.patchifier.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Token id of the begin-of-sequence marker.
    pub fn bos(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Class id of the null condition.
    pub fn null_class(&self) -> u32 {
        self.num_classes as u32
    }
}
