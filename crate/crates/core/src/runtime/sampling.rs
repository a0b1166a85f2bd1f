//! Step-by-step generation with patch skipping.
//!
//! Each step refreshes the token-level encoder and decoder over the whole
//! prefix. The global transformer runs only when the new position opens a
//! patch; positions that extend the open patch reuse its stored output.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenGrid;
use crate::entropy::{next_token_entropy, EntropyModel};
use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tape, Tensor};
use crate::model::{pack_batch, DparModel, SequenceInput};
use crate::patchifier::{incremental_decision, Decision, PatchPartition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Keep the `k` most likely tokens; 0 keeps all.
    pub top_k: usize,
    /// Nucleus mass; 1 keeps all.
    pub top_p: f64,
    /// 0 selects the argmax.
    pub temperature: f64,
    pub cfg_scale: f64,
    /// Inference-time entropy threshold replacing the trained one.
    #[serde(default)]
    pub entropy_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_k: 0,
            top_p: 1.0,
            temperature: 1.0,
            cfg_scale: 1.0,
            entropy_threshold: None,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return Err(Error::Config(format!(
                "cfg scale {} must be >= 0",
                self.cfg_scale
            )));
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.cfg_scale != 1.0
    }
}

/// `uncond + s·(cond − uncond)`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape(format!(
            "cond has {} logits, uncond {}",
            cond.len(),
            uncond.len()
        )));
    }
    if scale == 1.0 {
        return Ok(cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| u + scale * (c - u))
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Temperature, then top-k, then top-p, then renormalization. Temperature 0
/// puts all mass on the first maximal logit.
pub fn filtered_distribution(logits: &[f64], cfg: &SamplingConfig) -> Vec<f64> {
    let n = logits.len();
    if cfg.temperature == 0.0 {
        let arg = (0..n).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
        let mut p = vec![0.0; n];
        p[arg] = 1.0;
        return p;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
    let mut p = softmax(&scaled);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    let k = if cfg.top_k == 0 { n } else { cfg.top_k.min(n) };
    for &i in &order[..k] {
        keep[i] = true;
    }
    if cfg.top_p < 1.0 {
        let kept_mass: f64 = order[..k].iter().map(|&i| p[i]).sum();
        let mut mass = 0.0;
        for (rank, &i) in order[..k].iter().enumerate() {
            // smallest prefix whose renormalized mass reaches top_p
            if rank > 0 && mass >= cfg.top_p * kept_mass {
                keep[i] = false;
            }
            mass += p[i];
        }
    }
    for (v, &k) in p.iter_mut().zip(&keep) {
        if !k {
            *v = 0.0;
        }
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Everything recorded during one generation.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub tokens: Vec<u32>,
    /// `+inf` followed by the entropy computed before each later step.
    pub entropies: Vec<f64>,
    pub partition: PatchPartition,
    /// Number of global-transformer evaluations.
    pub global_calls: usize,
    /// Guided next-token distribution at each step, before filtering.
    pub step_probs: Vec<Vec<f64>>,
}

/// Generate a `height × width` grid for `label` (`None` = unconditional).
pub fn sample<F: Scalar>(
    model: &DparModel<F>,
    entropy: &EntropyModel<F>,
    label: Option<u32>,
    height: usize,
    cfg: &SamplingConfig,
) -> Result<SampleTrace> {
    cfg.validate()?;
    let mcfg = model.config();
    if entropy.config().vocab_size != mcfg.vocab_size {
        return Err(Error::Data(format!(
            "entropy model vocabulary {} differs from model vocabulary {}",
            entropy.config().vocab_size,
            mcfg.vocab_size
        )));
    }
    let mut pcfg = mcfg.patchifier.clone();
    if let Some(th) = cfg.entropy_threshold {
        pcfg.entropy_threshold = th;
    }
    pcfg.validate()?;
    let width = pcfg.row_width;
    let total = height * width;
    if total == 0 {
        return Err(Error::Config("grid must be non-empty".into()));
    }
    let labels: Vec<Option<u32>> = if cfg.guided() {
        vec![label, None]
    } else {
        vec![label]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens: Vec<u32> = Vec::with_capacity(total);
    let mut entropies = Vec::with_capacity(total);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    // stored global outputs per stream, one row per opened patch
    let mut hats: Vec<Vec<F>> = vec![Vec::new(); labels.len()];
    let mut global_calls = 0;
    let mut step_probs = Vec::with_capacity(total);

    for t in 0..total {
        let e_t = if t == 0 {
            f64::INFINITY
        } else {
            next_token_entropy(entropy, &tokens, width)?
        };
        entropies.push(e_t);
        let open_len = spans.last().map_or(0, |&(s, e)| e - s + 1);
        let opens = t == 0 || incremental_decision(e_t, open_len, t, &pcfg) == Decision::NewPatch;
        if opens {
            spans.push((t, t));
        } else {
            spans.last_mut().expect("open patch").1 = t;
        }
        let partition = PatchPartition::from_spans(spans.clone())?;
        let inputs: Vec<SequenceInput> = labels
            .iter()
            .map(|&l| SequenceInput {
                context: tokens.clone(),
                partition: partition.clone(),
                label: l,
                targets: None,
            })
            .collect();
        let batch = pack_batch(&inputs, mcfg)?;
        let mut tape = Tape::new(model.params());
        let enc = model.encode(&mut tape, &batch)?;
        if opens {
            let out = model.global_forward(&mut tape, &batch, enc.h_patch)?;
            global_calls += 1;
            for (b, hat) in hats.iter_mut().enumerate() {
                let last = batch.patch_range(b).end - 1;
                hat.extend_from_slice(tape.value(out).row(last));
            }
        }
        let stacked: Vec<F> = hats.iter().flatten().copied().collect();
        let h_hat = tape.constant(Tensor::from_vec(batch.num_patches(), mcfg.hidden, stacked)?);
        let logits = model.decode(&mut tape, &batch, enc.h_tok, h_hat)?;
        let row = |b: usize| -> Vec<f64> {
            let r = batch.token_range(b).end - 1;
            tape.value(logits)
                .row(r)
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect()
        };
        let guided = if cfg.guided() {
            cfg_combine(&row(0), &row(1), cfg.cfg_scale)?
        } else {
            row(0)
        };
        let probs = filtered_distribution(&guided, cfg);
        let next = if cfg.temperature == 0.0 {
            probs.iter().position(|&p| p == 1.0).expect("argmax")
        } else {
            WeightedIndex::new(&probs)
                .map_err(|e| Error::Numeric(format!("sampling distribution: {e}")))?
                .sample(&mut rng)
        };
        step_probs.push(softmax(&guided));
        tokens.push(next as u32);
    }
    Ok(SampleTrace {
        tokens,
        entropies,
        partition: PatchPartition::from_spans(spans)?,
        global_calls,
        step_probs,
    })
}

pub fn sample_grid<F: Scalar>(
    model: &DparModel<F>,
    entropy: &EntropyModel<F>,
    label: Option<u32>,
    height: usize,
    cfg: &SamplingConfig,
) -> Result<TokenGrid> {
    let trace = sample(model, entropy, label, height, cfg)?;
    let c = model.config();
    TokenGrid::new(height, c.patchifier.row_width, c.vocab_size, trace.tokens)
}
