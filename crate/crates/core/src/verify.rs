//! Self-contained invariant suite, runnable from the command line.
//!
//! Each check draws its own random cases from a seed and reports a single
//! pass/fail line. Model-level checks run at the caller's precision.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{check_gradients, AttentionMask, ParamStore, Scalar, Tape, Tensor};
use crate::model::{pack_batch, DparModel, ModelConfig, SequenceInput};
use crate::patchifier::{incremental_decision, patchify, Decision, PatchifierConfig};
use crate::positional::{
    apply_rotary, dynamic_rope_angles, patch_angles, rope2d_angles, EmbeddingVariant,
    PatchSpanCoord,
};
use crate::runtime::{baseline_flops, estimate_flops, softmax};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = *[1usize, 2].choose(rng).expect("non-empty");
    let head_dim = *[16usize, 32].choose(rng).expect("non-empty");
    let variant = *[
        EmbeddingVariant::Dynamic,
        EmbeddingVariant::DynamicNoRedundancy,
        EmbeddingVariant::Plain2d,
    ]
    .choose(rng)
    .expect("non-empty");
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

fn random_input(cfg: &ModelConfig, rng: &mut impl Rng, len: usize) -> Result<SequenceInput> {
    let tokens: Vec<u32> = (0..len)
        .map(|_| rng.random_range(0..cfg.vocab_size as u32))
        .collect();
    let mut e: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..2.0)).collect();
    e[0] = f64::INFINITY;
    let label = rng
        .random_bool(0.8)
        .then(|| rng.random_range(0..cfg.num_classes as u32));
    Ok(SequenceInput {
        context: tokens[..len - 1].to_vec(),
        partition: patchify(&e, &cfg.patchifier)?,
        label,
        targets: Some(tokens),
    })
}

fn row_probs<F: Scalar>(t: &Tensor<F>, r: usize) -> Vec<f64> {
    softmax(
        &t.row(r)
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect::<Vec<_>>(),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `patchify` against a token-by-token replay of `incremental_decision`.
pub fn patchifier_oracle(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let t = rng.random_range(1..=1024);
        let cfg = PatchifierConfig::new(
            rng.random_range(0.0..4.0),
            rng.random_range(1..9),
            rng.random_range(1..65),
        );
        let mut e: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..4.0)).collect();
        e[0] = f64::INFINITY;
        let p = patchify(&e, &cfg)?;
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for (i, &v) in e.iter().enumerate() {
            let open = spans.last().map_or(0, |&(s, end)| end - s + 1);
            match incremental_decision(v, open, i, &cfg) {
                Decision::Extend => spans.last_mut().expect("open patch").1 = i,
                Decision::NewPatch => spans.push((i, i)),
            }
        }
        if spans != p.spans() || p.validate(&cfg).is_err() {
            failures += 1;
        }
    }
    Ok(check(
        "patchifier oracle",
        failures == 0,
        format!("{cases} sequences, {failures} mismatches"),
    ))
}

pub fn worked_example() -> Result<Check> {
    let e = [f64::INFINITY, 0.5, 0.3, 2.0, 0.2, 0.4, 0.1, 0.9];
    let p = patchify(&e, &PatchifierConfig::new(1.0, 2, 4))?;
    Ok(check(
        "worked example",
        p.spans() == [(0, 0), (1, 2), (3, 3), (4, 5), (6, 7)],
        p.dump_line(),
    ))
}

/// Resample every token at or after `t` and measure the change of the
/// prediction at `t`.
pub fn causality<F: Scalar>(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let cfg = random_config(&mut rng);
        let model = DparModel::<F>::new(cfg.clone(), seed.wrapping_add(c as u64))?;
        let len = rng.random_range(2..24);
        let input = random_input(&cfg, &mut rng, len)?;
        let base = model.logits(&pack_batch(std::slice::from_ref(&input), &cfg)?)?;
        for t in 0..len {
            let mut changed = input.clone();
            for x in changed.context.iter_mut().skip(t) {
                *x = (*x + rng.random_range(1..cfg.vocab_size as u32)) % cfg.vocab_size as u32;
            }
            let logits = model.logits(&pack_batch(&[changed], &cfg)?)?;
            worst = worst.max(max_abs_diff(&row_probs(&base, t), &row_probs(&logits, t)));
        }
    }
    Ok(check(
        "causality leak",
        worst < 1e-5,
        format!("{cases} cases, max prob change {worst:.2e}"),
    ))
}

/// Per-sample losses and mean-loss gradients of a packed batch against
/// one-sample evaluations.
pub fn packed_equivalence<F: Scalar>(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut loss_err, mut grad_err) = (0.0f64, 0.0f64);
    for c in 0..cases {
        let cfg = random_config(&mut rng);
        let model = DparModel::<F>::new(cfg.clone(), seed.wrapping_add(c as u64))?;
        let k = rng.random_range(2..5);
        let inputs = (0..k)
            .map(|_| {
                let len = rng.random_range(2..24);
                random_input(&cfg, &mut rng, len)
            })
            .collect::<Result<Vec<_>>>()?;
        let grads_of = |inputs: &[SequenceInput]| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            let batch = pack_batch(inputs, &cfg)?;
            let mut tape = Tape::new(model.params());
            let l = model.losses(&mut tape, &batch)?;
            let g = tape.backward(l.mean)?;
            let flat = model
                .params()
                .iter()
                .map(|(id, _, t)| {
                    g.get(id).map_or(vec![0.0; t.len()], |g| {
                        g.data().iter().map(|v| v.to_f64_lossy()).collect()
                    })
                })
                .collect();
            Ok((l.per_sample, flat))
        };
        let (packed_losses, packed_grads) = grads_of(&inputs)?;
        let total: usize = inputs.iter().map(SequenceInput::len).sum();
        let mut expect: Vec<Vec<f64>> = packed_grads.iter().map(|g| vec![0.0; g.len()]).collect();
        for (b, input) in inputs.iter().enumerate() {
            let (l, g) = grads_of(std::slice::from_ref(input))?;
            loss_err = loss_err.max((l[0] - packed_losses[b]).abs() / l[0].abs().max(1e-12));
            let w = input.len() as f64 / total as f64;
            for (acc, part) in expect.iter_mut().zip(&g) {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a += w * v;
                }
            }
        }
        for (got, want) in packed_grads.iter().zip(&expect) {
            let diff = got
                .iter()
                .zip(want)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = want.iter().map(|b| b * b).sum::<f64>().sqrt();
            grad_err = grad_err.max(diff / norm.max(1e-6));
        }
    }
    Ok(check(
        "packed equivalence",
        loss_err < 1e-5 && grad_err < 1e-4,
        format!("{cases} batches, loss rel {loss_err:.2e}, grad rel {grad_err:.2e}"),
    ))
}

/// Norm preservation, relative-offset invariance and dimension layout.
pub fn rope_properties(vectors: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut norm_dev, mut offset_dev) = (0.0f64, 0.0f64);
    for _ in 0..vectors {
        let d = 16 * rng.random_range(1..9);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys = rng.random_range(0..32);
        let span = PatchSpanCoord {
            x: rng.random_range(-1..32),
            y_start: ys,
            y_end: ys + rng.random_range(0..8),
        };
        let rotated = apply_rotary(&q, &dynamic_rope_angles(span, d)?)?;
        norm_dev = norm_dev.max((norm(&rotated) - norm(&q)).abs());
        let (a, b, y, s) = (
            rng.random_range(0..64),
            rng.random_range(0..64),
            rng.random_range(0..64),
            rng.random_range(-30..30),
        );
        let rot =
            |v: &[f64], x: i64| -> Result<Vec<f64>> { apply_rotary(v, &rope2d_angles(x, y, d)?) };
        let base = dot(&rot(&q, a)?, &rot(&k, b)?);
        let moved = dot(&rot(&q, a + s)?, &rot(&k, b + s)?);
        offset_dev = offset_dev.max((base - moved).abs());
    }
    let mut layout = true;
    for d in (16..=1024).step_by(16) {
        let span = PatchSpanCoord {
            x: 2,
            y_start: 1,
            y_end: 4,
        };
        for v in [
            EmbeddingVariant::Dynamic,
            EmbeddingVariant::DynamicNoRedundancy,
            EmbeddingVariant::Plain2d,
        ] {
            layout &= patch_angles(v, span, d)?.angles.len() == d / 2;
        }
    }
    Ok(check(
        "rope properties",
        norm_dev < 1e-5 && offset_dev < 1e-5 && layout,
        format!("norm dev {norm_dev:.2e}, offset dev {offset_dev:.2e}, layouts ok: {layout}"),
    ))
}

/// Finite-difference check of a small model's full loss.
pub fn model_gradients(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = random_config(&mut rng);
    cfg.global_layers = 1;
    let model = DparModel::<f64>::new(cfg.clone(), seed)?;
    let inputs = (0..2)
        .map(|_| random_input(&cfg, &mut rng, 9))
        .collect::<Result<Vec<_>>>()?;
    let batch = pack_batch(&inputs, &cfg)?;
    let report = check_gradients(
        model.params(),
        |t| Ok(model.losses(t, &batch)?.mean),
        Some(8),
    )?;
    let mut attn = ParamStore::new();
    let q = attn.add("q", Tensor::randn(5, 8, 1.0, &mut rng));
    let mask = AttentionMask::block_diagonal_causal(&[2, 3])?;
    let attn_report = check_gradients(
        &attn,
        |t| {
            let x = t.param(q);
            let y = t.attention(x, x, x, 2, &mask)?;
            let s = t.sum(y);
            Ok(s)
        },
        None,
    )?;
    let worst = report.max_rel_error.max(attn_report.max_rel_error);
    Ok(check(
        "gradient checks",
        worst < 1e-3,
        format!(
            "{} entries, max relative error {worst:.2e}",
            report.checked + attn_report.checked
        ),
    ))
}

/// Compute ratio of the base-size patch model against a 12-layer token model.
pub fn flops_ratio() -> Result<Check> {
    let cfg = ModelConfig {
        encoder_layers: 1,
        global_layers: 8,
        decoder_layers: 3,
        hidden: 768,
        heads: 12,
        vocab_size: 16384,
        num_classes: 1000,
        ..ModelConfig::default()
    };
    let ratio =
        estimate_flops(&cfg, 256, 1.81)?.forward_total / baseline_flops(12, 768, 16384, 256);
    Ok(check(
        "flops ratio",
        (0.65..=0.90).contains(&ratio),
        format!("ratio {ratio:.4} at T=256, P_avg=1.81"),
    ))
}

/// Every check; model-level ones at 64-bit precision when `wide`.
pub fn run_suite(wide: bool, seed: u64) -> Result<Vec<Check>> {
    let (causal, packed) = if wide {
        (
            causality::<f64>(20, seed)?,
            packed_equivalence::<f64>(10, seed)?,
        )
    } else {
        (
            causality::<f32>(20, seed)?,
            packed_equivalence::<f32>(10, seed)?,
        )
    };
    Ok(vec![
        patchifier_oracle(1000, seed)?,
        worked_example()?,
        causal,
        packed,
        model_gradients(seed)?,
        rope_properties(10_000, seed)?,
        flops_ratio()?,
    ])
}
