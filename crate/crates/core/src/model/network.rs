//! Parameters and forward stages of the patch model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledSample;
use crate::entropy::EntropySequence;
use crate::error::{Error, Result};
use crate::kernels::{
    cross_attention, transformer_block, BlockParams, CrossAttnParams, ParamId, ParamStore, Scalar,
    Tape, Tensor, Var,
};
use crate::model::batch::{pack_batch, training_input, PackedBatch};
use crate::model::ModelConfig;

#[derive(Clone, Debug)]
struct CopyParams {
    norm: ParamId,
    proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct DparModel<F: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    token_embed: ParamId,
    class_embed: ParamId,
    encoder: Vec<BlockParams>,
    pool: CrossAttnParams,
    global: Vec<BlockParams>,
    copies: Vec<CopyParams>,
    decoder: Vec<BlockParams>,
    final_norm: ParamId,
    head: ParamId,
}

/// Encoder outputs: token states and one pooled state per patch.
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    pub h_tok: Var,
    pub h_patch: Var,
}

/// Per-row cross-entropy plus the batch mean used as the training objective.
#[derive(Clone, Debug)]
pub struct PackedLosses {
    pub per_row: Var,
    pub mean: Var,
    pub per_sample: Vec<f64>,
}

fn cast_angles<F: Scalar>(angles: &[f64]) -> Vec<F> {
    angles.iter().map(|&a| F::of(a)).collect()
}

impl<F: Scalar> DparModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, h, std) = (config.hidden, config.heads, config.init_std);
        let token_embed = p.add(
            "token_embed",
            Tensor::randn(config.vocab_size + 1, d, std, &mut rng),
        );
        let class_embed = p.add(
            "class_embed",
            Tensor::randn(config.num_classes + 1, d, std, &mut rng),
        );
        let encoder = (0..config.encoder_layers)
            .map(|l| BlockParams::init(&mut p, &format!("encoder{l}"), d, h, std, &mut rng))
            .collect();
        let pool = CrossAttnParams::init(&mut p, "pool", d, h, std, &mut rng);
        let global = (0..config.global_layers)
            .map(|l| BlockParams::init(&mut p, &format!("global{l}"), d, h, std, &mut rng))
            .collect();
        let mut copies = Vec::with_capacity(config.decoder_layers);
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            copies.push(CopyParams {
                norm: p.add(format!("copy{l}.norm"), Tensor::full(1, d, F::one())),
                proj: p.add(format!("copy{l}.proj"), Tensor::randn(d, d, std, &mut rng)),
            });
            decoder.push(BlockParams::init(
                &mut p,
                &format!("decoder{l}"),
                d,
                h,
                std,
                &mut rng,
            ));
        }
        let final_norm = p.add("final_norm", Tensor::full(1, d, F::one()));
        let head = p.add("head", Tensor::randn(d, config.vocab_size, std, &mut rng));
        Ok(Self {
            config,
            params: p,
            token_embed,
            class_embed,
            encoder,
            pool,
            global,
            copies,
            decoder,
            final_norm,
            head,
        })
    }

    /// Rebuild with the given weights, which must match the config's layout.
    pub fn from_params(config: ModelConfig, params: &ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> DparModel<G> {
        DparModel {
            config: self.config.clone(),
            params: self.params.cast(),
            token_embed: self.token_embed,
            class_embed: self.class_embed,
            encoder: self.encoder.clone(),
            pool: self.pool.clone(),
            global: self.global.clone(),
            copies: self.copies.clone(),
            decoder: self.decoder.clone(),
            final_norm: self.final_norm,
            head: self.head,
        }
    }

    /// Copy projections of every decoder block.
    pub fn copy_projections(&self) -> Vec<ParamId> {
        self.copies.iter().map(|c| c.proj).collect()
    }

    /// Causal token encoder, then each patch's mean state cross-attends to
    /// the tokens of its own span.
    pub fn encode(&self, tape: &mut Tape<'_, F>, batch: &PackedBatch) -> Result<StageOutputs> {
        let angles = cast_angles::<F>(&batch.token_angles);
        let embed = tape.param(self.token_embed);
        let mut h = tape.gather_rows(embed, batch.token_ids.clone())?;
        for b in &self.encoder {
            h = transformer_block(tape, h, b, &batch.token_mask, Some(&angles))?;
        }
        let queries = tape.segment_mean(h, batch.patch_ranges.clone())?;
        let h_patch = cross_attention(tape, queries, h, &self.pool, &batch.patch_mask)?;
        Ok(StageOutputs { h_tok: h, h_patch })
    }

    /// Causal transformer over `[condition, patch_0 .. patch_{M-2}]`; output
    /// row `m` conditions the tokens of patch `m`.
    pub fn global_forward(
        &self,
        tape: &mut Tape<'_, F>,
        batch: &PackedBatch,
        h_patch: Var,
    ) -> Result<Var> {
        let rows = tape.value(h_patch).rows();
        if rows != batch.num_patches() {
            return Err(Error::Shape(format!(
                "{rows} patch states for {} patches",
                batch.num_patches()
            )));
        }
        let angles = cast_angles::<F>(&batch.global_angles);
        let classes = tape.param(self.class_embed);
        let conds = tape.gather_rows(classes, batch.conditions.clone())?;
        let source = tape.concat_rows(conds, h_patch)?;
        let mut x = tape.gather_rows(source, batch.global_index.clone())?;
        for b in &self.global {
            x = transformer_block(tape, x, b, &batch.global_mask, Some(&angles))?;
        }
        Ok(x)
    }

    /// Each block adds the projected global output of a token's patch, then
    /// runs causal token attention. Returns `tokens × V` logits.
    pub fn decode(
        &self,
        tape: &mut Tape<'_, F>,
        batch: &PackedBatch,
        h_tok: Var,
        h_hat: Var,
    ) -> Result<Var> {
        let rows = tape.value(h_hat).rows();
        if rows != batch.num_patches() || tape.value(h_tok).rows() != batch.num_tokens() {
            return Err(Error::Shape(format!(
                "decoder got {rows} patch rows and {} token rows for {} patches / {} tokens",
                tape.value(h_tok).rows(),
                batch.num_patches(),
                batch.num_tokens()
            )));
        }
        let angles = cast_angles::<F>(&batch.token_angles);
        let mut h = h_tok;
        for (copy, block) in self.copies.iter().zip(&self.decoder) {
            let w = tape.param(copy.norm);
            let normed = tape.rms_norm(h_hat, w)?;
            let proj = tape.param(copy.proj);
            let projected = tape.matmul(normed, proj)?;
            let per_token = tape.gather_rows(projected, batch.patch_of.clone())?;
            h = tape.add(h, per_token)?;
            h = transformer_block(tape, h, block, &batch.token_mask, Some(&angles))?;
        }
        let w = tape.param(self.final_norm);
        let h = tape.rms_norm(h, w)?;
        let head = tape.param(self.head);
        tape.matmul(h, head)
    }

    pub fn forward(&self, tape: &mut Tape<'_, F>, batch: &PackedBatch) -> Result<Var> {
        let enc = self.encode(tape, batch)?;
        let h_hat = self.global_forward(tape, batch, enc.h_patch)?;
        self.decode(tape, batch, enc.h_tok, h_hat)
    }

    pub fn logits(&self, batch: &PackedBatch) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }

    pub fn losses(&self, tape: &mut Tape<'_, F>, batch: &PackedBatch) -> Result<PackedLosses> {
        let targets = batch
            .targets
            .clone()
            .ok_or_else(|| Error::Data("batch has no targets".into()))?;
        let logits = self.forward(tape, batch)?;
        let per_row = tape.cross_entropy(logits, targets)?;
        let total = tape.sum(per_row);
        let mean = tape.scale(total, F::one() / F::of(batch.num_tokens() as f64));
        let rows = tape.value(per_row);
        let per_sample = (0..batch.num_samples())
            .map(|b| {
                let r = batch.token_range(b);
                let n = r.len() as f64;
                r.map(|i| rows.get(i, 0).to_f64_lossy()).sum::<f64>() / n
            })
            .collect();
        Ok(PackedLosses {
            per_row,
            mean,
            per_sample,
        })
    }
}

/// Mean next-token cross-entropy of one sample. With `cfg_drop` the label is
/// replaced by the null class.
pub fn training_forward<F: Scalar>(
    model: &DparModel<F>,
    sample: &LabeledSample,
    entropies: &EntropySequence,
    cfg_drop: bool,
) -> Result<f64> {
    let input = training_input(sample, entropies, &model.config.patchifier, cfg_drop)?;
    let batch = pack_batch(&[input], &model.config)?;
    Ok(packed_training_forward(model, &batch)?[0])
}

/// Per-sample mean losses of a packed batch.
pub fn packed_training_forward<F: Scalar>(
    model: &DparModel<F>,
    batch: &PackedBatch,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(&model.params);
    Ok(model.losses(&mut tape, batch)?.per_sample)
}
