#![allow(dead_code)]

use dpar::kernels::{Gradients, ParamStore, Scalar, Tape, Tensor};
use dpar::model::{pack_batch, DparModel, ModelConfig, PackedBatch, SequenceInput};
use dpar::patchifier::{patchify, PatchifierConfig};
use dpar::positional::EmbeddingVariant;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small random configuration: head dim 16 or 32, one to two layers per
/// stage, random patchifier settings and embedding variant.
pub fn tiny_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = *[1usize, 2].choose(rng).unwrap();
    let head_dim = *[16usize, 32].choose(rng).unwrap();
    let variant = *[
        EmbeddingVariant::Dynamic,
        EmbeddingVariant::DynamicNoRedundancy,
        EmbeddingVariant::Plain2d,
    ]
    .choose(rng)
    .unwrap();
    ModelConfig {
        encoder_layers: rng.random_range(1..3),
        global_layers: rng.random_range(0..3),
        decoder_layers: rng.random_range(1..3),
        hidden: heads * head_dim,
        heads,
        vocab_size: rng.random_range(5..20),
        num_classes: rng.random_range(1..5),
        patchifier: PatchifierConfig::new(
            rng.random_range(0.2..1.5),
            rng.random_range(1..5),
            rng.random_range(2..7),
        ),
        embedding_variant: variant,
        init_std: 0.3,
    }
}

/// Random entropies with the sentinel in front, on a scale around the
/// config's threshold.
pub fn random_entropies(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let mut e: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..2.0)).collect();
    e[0] = f64::INFINITY;
    e
}

/// A random teacher-forced sequence of `len` grid tokens.
pub fn random_input(cfg: &ModelConfig, rng: &mut impl Rng, len: usize) -> SequenceInput {
    let tokens: Vec<u32> = (0..len)
        .map(|_| rng.random_range(0..cfg.vocab_size as u32))
        .collect();
    let partition = patchify(&random_entropies(rng, len), &cfg.patchifier).unwrap();
    let label = rng
        .random_bool(0.8)
        .then(|| rng.random_range(0..cfg.num_classes as u32));
    SequenceInput {
        context: tokens[..len - 1].to_vec(),
        partition,
        label,
        targets: Some(tokens),
    }
}

pub fn probs_row<F: Scalar>(logits: &Tensor<F>, row: usize) -> Vec<f64> {
    let xs: Vec<f64> = logits.row(row).iter().map(|v| v.to_f64_lossy()).collect();
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / z).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gradients of the mean loss of a packed batch.
pub fn grads_of<F: Scalar>(model: &DparModel<F>, batch: &PackedBatch) -> (f64, Gradients<F>) {
    let mut tape = Tape::new(model.params());
    let l = model.losses(&mut tape, batch).unwrap();
    let mean = tape.value(l.mean).item().to_f64_lossy();
    (mean, tape.backward(l.mean).unwrap())
}

pub fn single(model_cfg: &ModelConfig, input: &SequenceInput) -> PackedBatch {
    pack_batch(std::slice::from_ref(input), model_cfg).unwrap()
}

/// Largest per-tensor relative difference `|a - b| / max(|b|, floor)`.
pub fn grad_rel_diff<F: Scalar>(
    params: &ParamStore<F>,
    a: &Gradients<F>,
    b: &[(usize, Vec<f64>)],
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (id, want) in b {
        let id = params.ids().nth(*id).unwrap();
        let got: Vec<f64> = a
            .get(id)
            .map(|g| g.data().iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_else(|| vec![0.0; want.len()]);
        let diff: f64 = got
            .iter()
            .zip(want)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = want.iter().map(|y| y * y).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(floor));
    }
    worst
}

/// Largest change of any predicted distribution at position `t` when every
/// grid token at or after `t` is resampled, over all `t` of one random case.
pub fn causality_leak(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = tiny_config(&mut r);
    let model = DparModel::<f64>::new(cfg.clone(), seed).unwrap();
    let len = r.random_range(2..28);
    let input = random_input(&cfg, &mut r, len);
    let base = model.logits(&single(&cfg, &input)).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..len {
        let mut changed = input.clone();
        for x in changed.context.iter_mut().skip(t) {
            *x = (*x + r.random_range(1..cfg.vocab_size as u32)) % cfg.vocab_size as u32;
        }
        let logits = model.logits(&single(&cfg, &changed)).unwrap();
        worst = worst.max(max_abs_diff(&probs_row(&base, t), &probs_row(&logits, t)));
    }
    worst
}

/// Packs a random batch and compares per-sample losses and mean-loss
/// gradients against one-sample evaluations. Returns the worst relative
/// loss error and the worst per-tensor relative gradient error.
pub fn packed_equivalence(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let cfg = tiny_config(&mut r);
    let model = DparModel::<f32>::new(cfg.clone(), seed).unwrap();
    let k = r.random_range(2..5);
    let inputs: Vec<SequenceInput> = (0..k)
        .map(|_| {
            let len = r.random_range(2..24);
            random_input(&cfg, &mut r, len)
        })
        .collect();
    let batch = pack_batch(&inputs, &cfg).unwrap();
    let packed = dpar::model::packed_training_forward(&model, &batch).unwrap();
    let (_, packed_grads) = grads_of(&model, &batch);

    let total: usize = inputs.iter().map(|i| i.len()).sum();
    let n_params = model.params().len();
    let mut expect: Vec<(usize, Vec<f64>)> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, (_, _, t))| (i, vec![0.0; t.len()]))
        .collect();
    let mut loss_err: f64 = 0.0;
    for (b, input) in inputs.iter().enumerate() {
        let one = single(&cfg, input);
        let (mean, g) = grads_of(&model, &one);
        loss_err = loss_err.max((mean - packed[b]).abs() / mean.abs().max(1e-12));
        let w = input.len() as f64 / total as f64;
        for (slot, id) in expect.iter_mut().zip(model.params().ids()).take(n_params) {
            if let Some(t) = g.get(id) {
                for (e, v) in slot.1.iter_mut().zip(t.data()) {
                    *e += w * v.to_f64_lossy();
                }
            }
        }
    }
    let grad_err = grad_rel_diff(model.params(), &packed_grads, &expect, 1e-6);
    (loss_err, grad_err)
}

/// Largest gap between the per-step sampling distributions of a trace and
/// the teacher-forced distributions of its final tokens and partition.
pub fn teacher_forced_gap<F: Scalar>(
    model: &DparModel<F>,
    trace: &dpar::runtime::SampleTrace,
    label: Option<u32>,
    cfg_scale: f64,
) -> f64 {
    let n = trace.tokens.len();
    let input = |l| SequenceInput {
        context: trace.tokens[..n - 1].to_vec(),
        partition: trace.partition.clone(),
        label: l,
        targets: None,
    };
    let cond = model
        .logits(&single(model.config(), &input(label)))
        .unwrap();
    let uncond = model.logits(&single(model.config(), &input(None))).unwrap();
    let row = |t: &Tensor<F>, r: usize| -> Vec<f64> {
        t.row(r).iter().map(|v| v.to_f64_lossy()).collect()
    };
    let mut worst: f64 = 0.0;
    for (t, step) in trace.step_probs.iter().enumerate() {
        let guided =
            dpar::runtime::cfg_combine(&row(&cond, t), &row(&uncond, t), cfg_scale).unwrap();
        worst = worst.max(max_abs_diff(step, &dpar::runtime::softmax(&guided)));
    }
    worst
}
