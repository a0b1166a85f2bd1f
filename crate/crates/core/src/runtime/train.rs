//! Packed AdamW training and teacher-forced evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::entropy::EntropyCache;
use crate::error::{Error, Result};
use crate::kernels::{AdamWConfig, Gradients, OptimizerState, Scalar, Tape};
use crate::model::{pack_batch, training_input, DparModel, ModelConfig, SequenceInput};
use crate::patchifier::PatchifierConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Probability of replacing a sample's label with the null class.
    pub cfg_drop: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            cfg_drop: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if o.lr.is_nan() || o.lr <= 0.0 || o.weight_decay < 0.0 || !unit(o.beta1) || !unit(o.beta2)
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.clip_norm < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop) {
            return Err(Error::Config(format!(
                "cfg drop {} outside [0, 1]",
                self.cfg_drop
            )));
        }
        Ok(())
    }
}

/// Sample order shuffled once per pass over the corpus.
#[derive(Clone, Debug)]
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Independent Bernoulli draws deciding which samples lose their label.
pub fn draw_cfg_drops(rng: &mut impl Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

fn check_cache(corpus: &Corpus, cache: &EntropyCache) -> Result<()> {
    if cache.sequences.len() != corpus.len() || cache.length != corpus.seq_len() {
        return Err(Error::Data(format!(
            "entropy cache holds {} sequences of length {}, corpus has {} of length {}",
            cache.sequences.len(),
            cache.length,
            corpus.len(),
            corpus.seq_len()
        )));
    }
    Ok(())
}

fn check_model(cfg: &ModelConfig, corpus: &Corpus) -> Result<()> {
    if cfg.vocab_size != corpus.vocab_size || cfg.num_classes != corpus.num_classes {
        return Err(Error::Data(format!(
            "model expects V={} and {} classes, corpus has V={} and {}",
            cfg.vocab_size, cfg.num_classes, corpus.vocab_size, corpus.num_classes
        )));
    }
    if cfg.patchifier.row_width != corpus.width {
        return Err(Error::Data(format!(
            "patchifier row width {} differs from grid width {}",
            cfg.patchifier.row_width, corpus.width
        )));
    }
    Ok(())
}

/// Loss and gradients of the token-mean objective over `inputs`, split
/// across the rayon pool. One chunk per thread keeps single-threaded runs
/// bitwise reproducible.
pub fn batch_gradients<F: Scalar>(
    model: &DparModel<F>,
    inputs: &[SequenceInput],
) -> Result<(f64, Gradients<F>)> {
    let threads = rayon::current_num_threads().clamp(1, inputs.len().max(1));
    let chunk = inputs.len().div_ceil(threads);
    let total: usize = inputs.iter().map(SequenceInput::len).sum();
    let parts = inputs
        .par_chunks(chunk)
        .map(|part| {
            let batch = pack_batch(part, model.config())?;
            let mut tape = Tape::new(model.params());
            let losses = model.losses(&mut tape, &batch)?;
            let weight = batch.num_tokens() as f64 / total as f64;
            let loss = tape.value(losses.mean).item().to_f64_lossy() * weight;
            let mut grads = tape.backward(losses.mean)?;
            grads.scale(F::of(weight));
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter
        .next()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        grads.merge(g);
    }
    Ok((loss, grads))
}

/// Owns the model, optimizer state and data order of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DparModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub config: TrainConfig,
    pub step: usize,
    rng: ChaCha8Rng,
    sampler: EpochSampler,
}

impl Trainer {
    pub fn new(model: DparModel<f32>, config: TrainConfig, corpus_len: usize) -> Result<Self> {
        config.validate()?;
        if corpus_len == 0 {
            return Err(Error::Data("cannot train on an empty corpus".into()));
        }
        let optimizer = OptimizerState::new(config.optimizer, model.params());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            rng,
            sampler: EpochSampler::new(corpus_len),
            config,
        })
    }

    /// One optimizer update on the next mini-batch.
    pub fn train_step(&mut self, corpus: &Corpus, cache: &EntropyCache) -> Result<StepStats> {
        let n = self.config.batch_size;
        let picks: Vec<usize> = (0..n).map(|_| self.sampler.next(&mut self.rng)).collect();
        let drops = draw_cfg_drops(&mut self.rng, n, self.config.cfg_drop);
        let pcfg = &self.model.config().patchifier;
        let inputs = picks
            .iter()
            .zip(&drops)
            .map(|(&i, &drop)| training_input(&corpus.samples[i], &cache.sequences[i], pcfg, drop))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_gradients(&self.model, &inputs)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {loss} at step {} (samples {picks:?})",
                self.step
            )));
        }
        let report = self.optimizer.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm: report.grad_norm,
        })
    }

    /// Run the remaining steps, calling `on_step` after each.
    pub fn run<C>(
        &mut self,
        corpus: &Corpus,
        cache: &EntropyCache,
        mut on_step: C,
    ) -> Result<Vec<StepStats>>
    where
        C: FnMut(&Trainer, &StepStats) -> Result<()>,
    {
        check_model(self.model.config(), corpus)?;
        check_cache(corpus, cache)?;
        let mut history = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            let stats = self.train_step(corpus, cache)?;
            on_step(self, &stats)?;
            history.push(stats);
        }
        Ok(history)
    }
}

/// Build a fresh model and train it to completion.
pub fn train(
    corpus: &Corpus,
    cache: &EntropyCache,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Trainer, Vec<StepStats>)> {
    let model = DparModel::new(model_cfg.clone(), train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), corpus.len())?;
    let history = trainer.run(corpus, cache, |_, _| Ok(()))?;
    Ok((trainer, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    /// Mean next-token cross-entropy in nats.
    pub cross_entropy: f64,
    /// Fraction of positions whose argmax equals the target.
    pub accuracy: f64,
    pub tokens: usize,
}

/// Conditional teacher-forced loss and argmax accuracy, with the
/// patchifier optionally overridden.
pub fn evaluate<F: Scalar>(
    model: &DparModel<F>,
    corpus: &Corpus,
    cache: &EntropyCache,
    patchifier: Option<&PatchifierConfig>,
) -> Result<EvalMetrics> {
    check_model(model.config(), corpus)?;
    check_cache(corpus, cache)?;
    let pcfg = patchifier.unwrap_or(&model.config().patchifier);
    let chunk = 16;
    let parts = (0..corpus.len())
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idx| {
            let inputs = idx
                .iter()
                .map(|&i| training_input(&corpus.samples[i], &cache.sequences[i], pcfg, false))
                .collect::<Result<Vec<_>>>()?;
            let batch = pack_batch(&inputs, model.config())?;
            let logits = model.logits(&batch)?;
            let targets = batch
                .targets
                .as_ref()
                .expect("training inputs carry targets");
            let mut ce = 0.0;
            let mut hits = 0usize;
            for (r, &t) in targets.iter().enumerate() {
                let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64_lossy()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                ce += lse - row[t];
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                hits += usize::from(arg == t);
            }
            Ok((ce, hits, targets.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (ce, hits, n) = parts
        .into_iter()
        .fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if n == 0 {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    Ok(EvalMetrics {
        cross_entropy: ce / n as f64,
        accuracy: hits as f64 / n as f64,
        tokens: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_visits_every_index_once_per_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = EpochSampler::new(5);
        let mut seen: Vec<usize> = (0..5).map(|_| s.next(&mut rng)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_bad_rates() {
        let c = TrainConfig {
            cfg_drop: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer.beta2 = 1.0;
        assert!(c.validate().is_err());
    }
}
