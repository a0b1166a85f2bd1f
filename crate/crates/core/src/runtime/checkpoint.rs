//! Typed wrappers over the `DPCK` container for both model kinds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{EntropyConfig, EntropyModel};
use crate::error::{Error, Result};
use crate::kernels::checkpoint::{digest, Checkpoint, Digest};
use crate::kernels::OptimizerState;
use crate::model::{DparModel, ModelConfig};

/// JSON header stored inside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckpointHeader {
    Dpar {
        model: ModelConfig,
        /// Hex digest of the entropy model whose cache the model was trained on.
        entropy_digest: Option<String>,
        step: u64,
    },
    Entropy {
        model: EntropyConfig,
    },
}

/// A loaded patch-model checkpoint.
#[derive(Clone, Debug)]
pub struct DparCheckpoint {
    pub model: DparModel<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub entropy_digest: Option<String>,
    pub step: u64,
    pub config_digest: Digest,
}

fn header_json(h: &CheckpointHeader) -> String {
    serde_json::to_string(h).expect("header serializes")
}

/// Digest of a model config, as stamped on checkpoints and run manifests.
pub fn config_digest(cfg: &ModelConfig) -> Digest {
    digest(
        serde_json::to_string(cfg)
            .expect("config serializes")
            .as_bytes(),
    )
}

pub fn dpar_checkpoint(
    model: &DparModel<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    entropy_digest: Option<String>,
    step: u64,
) -> Checkpoint {
    let header = CheckpointHeader::Dpar {
        model: model.config().clone(),
        entropy_digest,
        step,
    };
    Checkpoint {
        config_json: header_json(&header),
        params: model.params().clone(),
        optimizer: optimizer.cloned(),
    }
}

pub fn save_dpar(
    path: impl AsRef<Path>,
    model: &DparModel<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    entropy_digest: Option<String>,
    step: u64,
) -> Result<()> {
    dpar_checkpoint(model, optimizer, entropy_digest, step).save(path)
}

fn header(ckpt: &Checkpoint) -> Result<CheckpointHeader> {
    serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))
}

pub fn dpar_from_checkpoint(ckpt: &Checkpoint) -> Result<DparCheckpoint> {
    match header(ckpt)? {
        CheckpointHeader::Dpar {
            model,
            entropy_digest,
            step,
        } => {
            let config_digest = config_digest(&model);
            Ok(DparCheckpoint {
                model: DparModel::from_params(model, &ckpt.params)?,
                optimizer: ckpt.optimizer.clone(),
                entropy_digest,
                step,
                config_digest,
            })
        }
        CheckpointHeader::Entropy { .. } => Err(Error::Format(
            "expected a patch-model checkpoint, found an entropy model".into(),
        )),
    }
}

pub fn load_dpar(path: impl AsRef<Path>) -> Result<DparCheckpoint> {
    dpar_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_entropy(path: impl AsRef<Path>, model: &EntropyModel<f32>) -> Result<()> {
    let header = CheckpointHeader::Entropy {
        model: model.config().clone(),
    };
    Checkpoint {
        config_json: header_json(&header),
        params: model.params().clone(),
        optimizer: None,
    }
    .save(path)
}

pub fn load_entropy(path: impl AsRef<Path>) -> Result<EntropyModel<f32>> {
    let ckpt = Checkpoint::load(path)?;
    match header(&ckpt)? {
        CheckpointHeader::Entropy { model } => EntropyModel::from_params(model, &ckpt.params),
        CheckpointHeader::Dpar { .. } => Err(Error::Format(
            "expected an entropy-model checkpoint, found a patch model".into(),
        )),
    }
}
