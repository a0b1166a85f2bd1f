//! The unconditional next-token entropy model and the `DPEN` entropy cache.
//!
//! The model is a small causal transformer over raw tokens with 2D RoPE at
//! each token's grid coordinate. Row `j` of its output predicts token `j+1`,
//! so the entropy of token `i >= 1` comes from row `i-1`; token 0 carries the
//! `+inf` sentinel. Entropies are in nats.
//!
//! Cache layout (little-endian):
//!
//! ```text
//! "DPEN" | version u16 | model digest [8] | count u32 | length u32 | count*length f32
//! ```

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RasterSequence};
use crate::error::{Error, Result};
use crate::kernels::checkpoint::{digest_hex, params_digest, Digest};
use crate::kernels::{
    cross_entropy, transformer_block, AdamWConfig, AttentionMask, BlockParams, OptimizerState,
    ParamId, ParamStore, Scalar, Tape, Tensor, Var,
};
use crate::positional::token_angle_rows;

pub const CACHE_MAGIC: &[u8; 4] = b"DPEN";
pub const CACHE_VERSION: u16 = 1;
pub const CACHE_HEADER_LEN: usize = 22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropyConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            vocab_size: 64,
            init_std: default_init_std(),
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.vocab_size == 0 || self.heads == 0 {
            return Err(Error::Config(
                "entropy model needs layers, heads and vocab_size >= 1".into(),
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) || !(self.hidden / self.heads).is_multiple_of(4)
        {
            return Err(Error::Config(format!(
                "hidden {} over {} heads must give a head dim divisible by 4",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Per-token entropies, `+inf` at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropySequence(Vec<f64>);

impl EntropySequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match values.first() {
            None => return Err(Error::Data("empty entropy sequence".into())),
            Some(&v) if v != f64::INFINITY => {
                return Err(Error::Data(format!(
                    "entropy sentinel is {v}, expected +inf"
                )))
            }
            _ => {}
        }
        if let Some(i) = values[1..].iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!(
                "entropy at {} is {}",
                i + 1,
                values[i + 1]
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `-Σ p ln p` of `softmax(logits)`.
pub fn entropy_of_logits<F: Scalar>(logits: &[F]) -> f64 {
    let max = logits
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy() - max).collect();
    let z: f64 = shifted.iter().map(|v| v.exp()).sum();
    let log_z = z.ln();
    let h: f64 = shifted
        .iter()
        .map(|&s| {
            let p = s.exp() / z;
            if p > 0.0 {
                -p * (s - log_z)
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

fn raster_coords(len: usize, width: usize) -> Vec<(i64, i64)> {
    (0..len)
        .map(|j| ((j / width) as i64, (j % width) as i64))
        .collect()
}

#[derive(Clone, Debug)]
pub struct EntropyModel<F: Scalar = f32> {
    config: EntropyConfig,
    params: ParamStore<F>,
    embed: ParamId,
    blocks: Vec<BlockParams>,
    final_norm: ParamId,
    head: ParamId,
}

impl<F: Scalar> EntropyModel<F> {
    pub fn new(config: EntropyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, std) = (config.hidden, config.init_std);
        let embed = params.add("embed", Tensor::randn(config.vocab_size, d, std, &mut rng));
        let blocks = (0..config.layers)
            .map(|l| {
                BlockParams::init(
                    &mut params,
                    &format!("block{l}"),
                    d,
                    config.heads,
                    std,
                    &mut rng,
                )
            })
            .collect();
        let final_norm = params.add("final_norm", Tensor::full(1, d, F::one()));
        let head = params.add("head", Tensor::randn(d, config.vocab_size, std, &mut rng));
        Ok(Self {
            config,
            params,
            embed,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &EntropyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Rebuild with the given weights, which must match the config's layout.
    pub fn from_params(config: EntropyConfig, params: &ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn cast<G: Scalar>(&self) -> EntropyModel<G> {
        EntropyModel {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            head: self.head,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Data(format!(
                "token {t} outside entropy-model vocabulary {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits for a packed set of sequences laid out on a grid of `width`.
    pub fn forward(&self, tape: &mut Tape<'_, F>, seqs: &[&[u32]], width: usize) -> Result<Var> {
        let mut tokens = Vec::new();
        let mut coords = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            tokens.extend(s.iter().map(|&t| t as usize));
            coords.extend(raster_coords(s.len(), width));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let mask = AttentionMask::block_diagonal_causal(&lengths)?;
        let angles: Vec<F> = token_angle_rows(&coords, self.config.head_dim())?
            .into_iter()
            .map(F::of)
            .collect();
        let embed = tape.param(self.embed);
        let mut h = tape.gather_rows(embed, tokens)?;
        for b in &self.blocks {
            h = transformer_block(tape, h, b, &mask, Some(&angles))?;
        }
        let norm = tape.param(self.final_norm);
        let h = tape.rms_norm(h, norm)?;
        let head = tape.param(self.head);
        tape.matmul(h, head)
    }

    /// Logits for one sequence; row `j` scores token `j+1`.
    pub fn logits(&self, tokens: &[u32], width: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, &[tokens], width)?;
        Ok(tape.value(out).clone())
    }

    /// Mean next-token cross-entropy over every position after the first.
    pub fn loss(&self, tape: &mut Tape<'_, F>, seqs: &[&[u32]], width: usize) -> Result<Var> {
        let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let targets: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s[1..].iter().map(|&t| t as usize))
            .collect();
        if targets.is_empty() {
            return Err(Error::Data(
                "entropy loss needs sequences of length >= 2".into(),
            ));
        }
        let logits = self.forward(tape, &inputs, width)?;
        cross_entropy(tape, logits, &targets, true)
    }
}

impl EntropyModel<f32> {
    fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    /// Digest over config and weights; stamps entropy caches.
    pub fn digest(&self) -> Digest {
        params_digest(&self.config_json(), &self.params)
    }
}

/// Entropy of the next token after `prefix`.
pub fn next_token_entropy<F: Scalar>(
    model: &EntropyModel<F>,
    prefix: &[u32],
    width: usize,
) -> Result<f64> {
    if prefix.is_empty() {
        return Err(Error::Data(
            "next-token entropy needs a non-empty prefix".into(),
        ));
    }
    let logits = model.logits(prefix, width)?;
    Ok(entropy_of_logits(logits.row(logits.rows() - 1)))
}

/// All entropies of a sequence from one teacher-forced pass.
pub fn entropy_map<F: Scalar>(
    model: &EntropyModel<F>,
    seq: &RasterSequence,
) -> Result<EntropySequence> {
    let mut values = vec![f64::INFINITY];
    if seq.len() > 1 {
        let logits = model.logits(&seq.tokens[..seq.len() - 1], seq.width)?;
        values.extend((0..logits.rows()).map(|r| entropy_of_logits(logits.row(r))));
    }
    EntropySequence::new(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for EntropyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

/// Train in place on random mini-batches; returns the loss per step.
pub fn train_entropy_model(
    model: &mut EntropyModel<f32>,
    corpus: &Corpus,
    cfg: &EntropyTrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot train on an empty corpus".into()));
    }
    if corpus.vocab_size != model.config.vocab_size {
        return Err(Error::Data(format!(
            "corpus vocabulary {} does not match model vocabulary {}",
            corpus.vocab_size, model.config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let batch = cfg.batch_size.clamp(1, corpus.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks = sample_indices(&mut rng, corpus.len(), batch);
        let seqs: Vec<&[u32]> = picks
            .iter()
            .map(|i| corpus.samples[i].grid.tokens())
            .collect();
        let (loss, grads) = {
            let mut tape = Tape::new(&model.params);
            let loss = model.loss(&mut tape, &seqs, corpus.width)?;
            (tape.value(loss).item() as f64, tape.backward(loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "entropy-model loss {loss} at step {step}"
            )));
        }
        opt.step(&mut model.params, &grads)?;
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("entropy step {step}: loss {loss:.4}");
        }
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyCache {
    pub model_digest: Digest,
    pub length: usize,
    pub sequences: Vec<EntropySequence>,
}

impl EntropyCache {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut b = Vec::with_capacity(CACHE_HEADER_LEN + 4 * self.length * self.sequences.len());
        b.extend_from_slice(CACHE_MAGIC);
        b.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        b.extend_from_slice(&self.model_digest);
        let count = u32::try_from(self.sequences.len())
            .map_err(|_| Error::Data("too many cached sequences".into()))?;
        let length =
            u32::try_from(self.length).map_err(|_| Error::Data("sequence too long".into()))?;
        b.extend_from_slice(&count.to_le_bytes());
        b.extend_from_slice(&length.to_le_bytes());
        for s in &self.sequences {
            if s.len() != self.length {
                return Err(Error::Shape(format!(
                    "cached sequence of length {} in a cache of length {}",
                    s.len(),
                    self.length
                )));
            }
            for &v in s.values() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CACHE_HEADER_LEN {
            return Err(Error::Format("entropy cache truncated in header".into()));
        }
        if &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Format("entropy cache magic mismatch".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported entropy cache version {version}"
            )));
        }
        let model_digest: Digest = bytes[6..14].try_into().expect("8 bytes");
        let count = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes")) as usize;
        let length = u32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes")) as usize;
        let expected = CACHE_HEADER_LEN + 4 * count * length;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "entropy cache is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[CACHE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let sequences = if length == 0 {
            Vec::new()
        } else {
            values
                .chunks(length)
                .map(|c| EntropySequence::new(c.to_vec()))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            model_digest,
            length,
            sequences,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn check_digest(&self, expected: &Digest) -> Result<()> {
        if &self.model_digest != expected {
            return Err(Error::DigestMismatch {
                expected: digest_hex(expected),
                found: digest_hex(&self.model_digest),
            });
        }
        Ok(())
    }
}

/// Entropy maps of every corpus sample, stored at f32 precision.
pub fn compute_entropy_cache(corpus: &Corpus, model: &EntropyModel<f32>) -> Result<EntropyCache> {
    if corpus.vocab_size != model.config.vocab_size {
        return Err(Error::Data(format!(
            "corpus vocabulary {} does not match entropy-model vocabulary {}",
            corpus.vocab_size, model.config.vocab_size
        )));
    }
    let sequences = corpus
        .samples
        .par_iter()
        .map(|s| {
            let seq = entropy_map(model, &crate::corpus::raster_flatten(&s.grid))?;
            EntropySequence::new(seq.values().iter().map(|&v| v as f32 as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyCache {
        model_digest: model.digest(),
        length: corpus.seq_len(),
        sequences,
    })
}

pub fn build_entropy_cache(
    corpus: &Corpus,
    model: &EntropyModel<f32>,
    path: impl AsRef<Path>,
) -> Result<EntropyCache> {
    let cache = compute_entropy_cache(corpus, model)?;
    cache.save(path)?;
    Ok(cache)
}

/// Load a cache and require it to come from the model with `expected` digest.
pub fn load_entropy_cache(path: impl AsRef<Path>, expected: &Digest) -> Result<EntropyCache> {
    let cache = EntropyCache::load(path)?;
    cache.check_digest(expected)?;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_saturated_entropy() {
        let uniform = vec![0.0f64; 16384];
        assert!((entropy_of_logits(&uniform) - 16384f64.ln()).abs() < 1e-9);
        let mut peaked = vec![0.0f64; 8];
        peaked[3] = 60.0;
        assert!(entropy_of_logits(&peaked) < 1e-6);
    }

    #[test]
    fn two_way_entropy() {
        let want = 3f64.ln() - 2.0 / 3.0 * 2f64.ln();
        assert!((entropy_of_logits(&[0.0, 2f64.ln()]) - want).abs() < 1e-12);
    }

    #[test]
    fn sequence_validation() {
        assert!(EntropySequence::new(vec![]).is_err());
        assert!(EntropySequence::new(vec![1.0, 0.5]).is_err());
        assert!(EntropySequence::new(vec![f64::INFINITY, f64::INFINITY]).is_err());
        assert!(EntropySequence::new(vec![f64::INFINITY, 0.5]).is_ok());
    }

    #[test]
    fn length_one_map_is_sentinel() {
        let model = EntropyModel::<f64>::new(
            EntropyConfig {
                layers: 1,
                hidden: 8,
                heads: 2,
                vocab_size: 4,
                init_std: 0.02,
            },
            0,
        )
        .unwrap();
        let seq = RasterSequence {
            tokens: vec![2],
            coords: vec![(0, 0)],
            width: 1,
        };
        assert_eq!(
            entropy_map(&model, &seq).unwrap().values(),
            &[f64::INFINITY]
        );
    }
}
