//! Analytic FLOP counts. A multiply-add counts as two FLOPs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::mlp_width;
use crate::model::ModelConfig;

/// Forward + backward as a multiple of the forward pass.
pub const TRAINING_MULTIPLIER: f64 = 3.0;

/// One pre-norm block at sequence length `l`: projections, attention
/// scores and values, and the gated MLP.
pub fn layer_flops(l: f64, d: f64, f: f64) -> f64 {
    8.0 * l * d * d + 4.0 * l * l * d + 6.0 * l * d * f
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub tokens: usize,
    pub patches: f64,
    pub encoder: f64,
    pub pooling: f64,
    pub global: f64,
    pub decoder: f64,
    pub head: f64,
    pub forward_total: f64,
    pub training_multiplier: f64,
    pub training_total: f64,
}

pub fn estimate_flops(cfg: &ModelConfig, tokens: usize, avg_patch_len: f64) -> Result<FlopsReport> {
    if avg_patch_len.is_nan() || avg_patch_len < 1.0 || avg_patch_len.is_infinite() {
        return Err(Error::Config(format!(
            "average patch length {avg_patch_len} below 1"
        )));
    }
    if tokens == 0 {
        return Err(Error::Config("token count must be positive".into()));
    }
    let t = tokens as f64;
    let m = t / avg_patch_len;
    let d = cfg.hidden as f64;
    let f = mlp_width(cfg.hidden) as f64;
    let encoder = cfg.encoder_layers as f64 * layer_flops(t, d, f);
    // query/output projections per patch, key/value per token, and each
    // patch attending over its own tokens
    let pooling = 4.0 * m * d * d + 4.0 * t * d * d + 4.0 * t * d;
    let global = cfg.global_layers as f64 * layer_flops(m + 1.0, d, f);
    let copy = cfg.decoder_layers as f64 * 2.0 * m * d * d;
    let decoder = cfg.decoder_layers as f64 * layer_flops(t, d, f) + copy;
    let head = 2.0 * t * d * cfg.vocab_size as f64;
    let forward_total = encoder + pooling + global + decoder + head;
    Ok(FlopsReport {
        tokens,
        patches: m,
        encoder,
        pooling,
        global,
        decoder,
        head,
        forward_total,
        training_multiplier: TRAINING_MULTIPLIER,
        training_total: TRAINING_MULTIPLIER * forward_total,
    })
}

/// Forward FLOPs of a plain token-level model with a class token prefix.
pub fn baseline_flops(layers: usize, hidden: usize, vocab_size: usize, tokens: usize) -> f64 {
    let (t, d) = (tokens as f64, hidden as f64);
    let f = mlp_width(hidden) as f64;
    layers as f64 * layer_flops(t + 1.0, d, f) + 2.0 * t * d * vocab_size as f64
}
