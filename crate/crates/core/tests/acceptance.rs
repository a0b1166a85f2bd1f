//! End-to-end acceptance checks. Runs without the libtest harness so that
//! each criterion prints one visible pass/fail line.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use dpar::corpus::{raster_flatten, synthetic_region_map, Corpus, SyntheticSpec};
use dpar::entropy::{
    compute_entropy_cache, entropy_map, train_entropy_model, EntropyConfig, EntropyModel,
    EntropyTrainConfig,
};
use dpar::kernels::*;
use dpar::model::{pack_batch, DparModel, ModelConfig};
use dpar::patchifier::*;
use dpar::positional::*;
use dpar::runtime::*;
use rand::Rng;

const GRID: usize = 8;
const VOCAB: usize = 32;
const CLASSES: usize = 100;
const BASE_THRESHOLD: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        height: GRID,
        width: GRID,
        vocab_size: VOCAB,
        num_regions: 4,
        noise_rate: 0.0,
        num_classes: CLASSES,
    }
}

/// Models shared by the training-dependent criteria.
struct Trained {
    entropy: EntropyModel<f32>,
    corpus: Corpus,
    model: DparModel<f32>,
    accuracy: f64,
    elapsed: Duration,
}

fn train_entropy() -> EntropyModel<f32> {
    let corpus = Corpus::synthetic(&spec(), 512, 10_000).unwrap();
    let cfg = EntropyConfig {
        layers: 2,
        hidden: 64,
        heads: 4,
        vocab_size: VOCAB,
        init_std: 0.02,
    };
    let mut model = EntropyModel::new(cfg, 0).unwrap();
    let tc = EntropyTrainConfig {
        steps: 600,
        batch_size: 8,
        ..EntropyTrainConfig::default()
    };
    train_entropy_model(&mut model, &corpus, &tc).unwrap();
    model
}

fn overfit(entropy: EntropyModel<f32>) -> Trained {
    let corpus = Corpus::synthetic(&spec(), 32, 0).unwrap();
    let cache = compute_entropy_cache(&corpus, &entropy).unwrap();
    let cfg = ModelConfig {
        vocab_size: VOCAB,
        num_classes: CLASSES,
        patchifier: PatchifierConfig::new(BASE_THRESHOLD, 4, GRID),
        ..ModelConfig::default()
    };
    let mut tc = TrainConfig {
        steps: 2000,
        batch_size: 8,
        seed: 0,
        ..TrainConfig::default()
    };
    tc.optimizer.lr = 1e-3;
    let start = Instant::now();
    let (trainer, _) = train(&corpus, &cache, &cfg, &tc).unwrap();
    let elapsed = start.elapsed();
    let accuracy = evaluate(&trainer.model, &corpus, &cache, None)
        .unwrap()
        .accuracy;
    Trained {
        entropy,
        corpus,
        model: trainer.model,
        accuracy,
        elapsed,
    }
}

fn replay(entropies: &[f64], cfg: &PatchifierConfig) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (t, &e) in entropies.iter().enumerate() {
        let current = spans.last().map_or(0, |&(s, end)| end - s + 1);
        match incremental_decision(e, current, t, cfg) {
            Decision::Extend => spans.last_mut().unwrap().1 = t,
            Decision::NewPatch => spans.push((t, t)),
        }
    }
    spans
}

fn partition_ok(p: &PatchPartition, len: usize, cfg: &PatchifierConfig) -> bool {
    let s = p.spans();
    let tiles = s.windows(2).all(|w| w[1].0 == w[0].1 + 1);
    let bounded = s.iter().all(|&(a, b)| {
        b >= a && b - a < cfg.max_patch_len && a / cfg.row_width == b / cfg.row_width
    });
    let head = s[0] == (0, 0) && (len == 1 || s[1].0 == 1);
    tiles && bounded && head && s.last().unwrap().1 == len - 1 && p.validate(cfg).is_ok()
}

fn c1_patchifier_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut failures = 0;
    for _ in 0..1000 {
        let t = r.random_range(1..=1024);
        let cfg = PatchifierConfig::new(
            r.random_range(0.0..4.0),
            r.random_range(1..9),
            r.random_range(1..65),
        );
        let mut e: Vec<f64> = (0..t).map(|_| r.random_range(0.0..4.0)).collect();
        e[0] = f64::INFINITY;
        let p = patchify(&e, &cfg).unwrap();
        if !partition_ok(&p, t, &cfg) || replay(&e, &cfg) != p.spans() {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(10),
        format!("1000 sequences, {failures} failures, {elapsed:.2?}"),
    )
}

fn c2_worked_example() -> Outcome {
    let e = [f64::INFINITY, 0.5, 0.3, 2.0, 0.2, 0.4, 0.1, 0.9];
    let p = patchify(&e, &PatchifierConfig::new(1.0, 2, 4)).unwrap();
    let want = [(0, 0), (1, 2), (3, 3), (4, 5), (6, 7)];
    outcome(p.spans() == want, format!("spans {}", p.dump_line()))
}

fn c3_causality() -> Outcome {
    let worst = (0..50)
        .map(|s| causality_leak(1000 + s))
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-5,
        format!("50 cases, max prob change {worst:.2e}"),
    )
}

fn c4_packed() -> Outcome {
    let (mut loss, mut grad) = (0.0f64, 0.0f64);
    for s in 0..20 {
        let (l, g) = packed_equivalence(2000 + s);
        loss = loss.max(l);
        grad = grad.max(g);
    }
    outcome(
        loss < 1e-5 && grad < 1e-4,
        format!("20 batches, loss rel {loss:.2e}, grad rel {grad:.2e}"),
    )
}

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(rows, cols, 1.0, &mut rng(seed))
}

fn probe(tape: &mut Tape<'_, f64>, x: Var) -> dpar::Result<Var> {
    let [r, c] = tape.value(x).shape();
    tape.weighted_sum(x, &randn(r, c, 999))
}

type UnaryOp = dyn Fn(&mut Tape<'_, f64>, Var) -> dpar::Result<Var>;

fn c5_gradients() -> Outcome {
    let mut reports: Vec<(&str, GradCheckReport)> = Vec::new();
    let x = randn(4, 6, 7);
    let unary: Vec<(&str, Box<UnaryOp>)> = vec![
        (
            "matmul",
            Box::new(|t, x| {
                let b = t.constant(randn(6, 3, 8));
                let y = t.matmul(x, b)?;
                probe(t, y)
            }),
        ),
        (
            "add",
            Box::new(|t, x| {
                let y = t.add(x, x)?;
                probe(t, y)
            }),
        ),
        (
            "scale",
            Box::new(|t, x| {
                let y = t.scale(x, -1.7);
                probe(t, y)
            }),
        ),
        (
            "rms_norm",
            Box::new(|t, x| {
                let w = t.constant(randn(1, 6, 9));
                let y = t.rms_norm(x, w)?;
                probe(t, y)
            }),
        ),
        (
            "swiglu",
            Box::new(|t, x| {
                let u = t.scale(x, 0.5);
                let y = t.swiglu(x, u)?;
                probe(t, y)
            }),
        ),
        (
            "gather_rows",
            Box::new(|t, x| {
                let y = t.gather_rows(x, vec![3, 0, 3, 1])?;
                probe(t, y)
            }),
        ),
        (
            "concat_rows",
            Box::new(|t, x| {
                let s = t.scale(x, 2.0);
                let y = t.concat_rows(x, s)?;
                probe(t, y)
            }),
        ),
        (
            "segment_mean",
            Box::new(|t, x| {
                let y = t.segment_mean(x, vec![0..1, 1..4])?;
                probe(t, y)
            }),
        ),
        (
            "sum_rows",
            Box::new(|t, x| {
                let c = t.constant(randn(6, 6, 3));
                let sq = t.matmul(x, c)?;
                let a = t.sum_rows(sq, 1..3)?;
                let b = t.sum_rows(sq, 0..1)?;
                t.add_scalars(vec![a, b, a])
            }),
        ),
        (
            "cross_entropy",
            Box::new(|t, x| cross_entropy(t, x, &[0, 5, 2, 2], true)),
        ),
    ];
    for (name, f) in &unary {
        reports.push((name, check_gradients_at(x.clone(), f).unwrap()));
    }
    reports.push((
        "rotary",
        check_gradients_at(randn(3, 8, 10), |t, x| {
            let angles: Vec<f64> = (0..6).map(|i| 0.4 * i as f64).collect();
            let y = t.rotary(x, &angles, 2)?;
            probe(t, y)
        })
        .unwrap(),
    ));
    let masks = [
        ("attention causal", AttentionMask::causal(5), 5),
        (
            "attention block-diagonal",
            AttentionMask::block_diagonal_causal(&[2, 3]).unwrap(),
            5,
        ),
        (
            "attention block-span",
            AttentionMask::block_span(vec![(0, 2), (2, 5)], 5).unwrap(),
            2,
        ),
    ];
    for (name, mask, queries) in masks {
        let mut store = ParamStore::new();
        let q = store.add("q", randn(queries, 8, 1));
        let k = store.add("k", randn(5, 8, 2));
        let v = store.add("v", randn(5, 8, 3));
        let r = check_gradients(
            &store,
            |t| {
                let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
                let y = t.attention(qv, kv, vv, 2, &mask)?;
                probe(t, y)
            },
            None,
        )
        .unwrap();
        reports.push((name, r));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let p = BlockParams::init(&mut store, "b", 16, 2, 0.3, &mut rng(17));
        let x = store.add("x", randn(4, 16, 18));
        let angles: Vec<f64> = (0..4 * 4).map(|i| 0.3 * i as f64).collect();
        let r = check_gradients(
            &store,
            |t| {
                let xv = t.param(x);
                let y = transformer_block(t, xv, &p, &AttentionMask::causal(4), Some(&angles))?;
                probe(t, y)
            },
            None,
        )
        .unwrap();
        reports.push(("transformer block", r));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let p = CrossAttnParams::init(&mut store, "x", 8, 2, 0.5, &mut rng(19));
        let ctx = store.add("ctx", randn(5, 8, 20));
        let r = check_gradients(
            &store,
            |t| {
                let c = t.param(ctx);
                let q = t.segment_mean(c, vec![0..2, 2..5])?;
                let mask = AttentionMask::block_span(vec![(0, 2), (2, 5)], 5)?;
                let y = cross_attention(t, q, c, &p, &mask)?;
                probe(t, y)
            },
            None,
        )
        .unwrap();
        reports.push(("cross attention", r));
    }
    {
        let mut r = rng(11);
        let mut cfg = tiny_config(&mut r);
        cfg.global_layers = 1;
        let model = DparModel::<f64>::new(cfg.clone(), 3).unwrap();
        let inputs: Vec<_> = (0..2).map(|_| random_input(&cfg, &mut r, 9)).collect();
        let batch = pack_batch(&inputs, &cfg).unwrap();
        let rep = check_gradients(
            model.params(),
            |t| Ok(model.losses(t, &batch)?.mean),
            Some(16),
        )
        .unwrap();
        reports.push(("full patch model", rep));
    }
    {
        let cfg = EntropyConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            vocab_size: 7,
            init_std: 0.3,
        };
        let model = EntropyModel::<f64>::new(cfg, 4).unwrap();
        let seqs: [&[u32]; 2] = [&[1, 4, 6, 0, 2], &[3, 3, 5]];
        let rep = check_gradients(model.params(), |t| model.loss(t, &seqs, 3), Some(16)).unwrap();
        reports.push(("entropy model", rep));
    }
    let (worst_name, worst) = reports
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    outcome(
        worst < 1e-3,
        format!(
            "{} checks, {checked} entries, worst {worst:.2e} ({worst_name})",
            reports.len()
        ),
    )
}

fn c6_rope() -> Outcome {
    let mut r = rng(6);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut norm_dev: f64 = 0.0;
    for i in 0..10_000 {
        let d = 16 * r.random_range(1..9);
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let table = if i % 2 == 0 {
            rope2d_angles(r.random_range(0..64), r.random_range(0..64), d).unwrap()
        } else {
            let ys = r.random_range(0..32);
            let span = PatchSpanCoord {
                x: r.random_range(-1..32),
                y_start: ys,
                y_end: ys + r.random_range(0..8),
            };
            dynamic_rope_angles(span, d).unwrap()
        };
        norm_dev = norm_dev.max((norm(&apply_rotary(&v, &table).unwrap()) - norm(&v)).abs());
    }
    let mut offset_dev: f64 = 0.0;
    for _ in 0..2000 {
        let d = 16 * r.random_range(1..5);
        let q: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let (a, b, other, shift) = (
            r.random_range(0..64i64),
            r.random_range(0..64i64),
            r.random_range(0..64i64),
            r.random_range(-30..30i64),
        );
        let along_x = r.random_bool(0.5);
        let rot = |v: &[f64], p: i64| {
            let t = if along_x {
                rope2d_angles(p, other, d)
            } else {
                rope2d_angles(other, p, d)
            };
            apply_rotary(v, &t.unwrap()).unwrap()
        };
        let base = dot(&rot(&q, a), &rot(&k, b));
        let moved = dot(&rot(&q, a + shift), &rot(&k, b + shift));
        offset_dev = offset_dev.max((base - moved).abs());
    }
    let mut arithmetic = true;
    for d in (16..=2048).step_by(16) {
        let span = PatchSpanCoord {
            x: 3,
            y_start: 2,
            y_end: 5,
        };
        arithmetic &= token_frequencies(d).len() == d / 4 && span_frequencies(d).len() == d / 16;
        for v in [
            EmbeddingVariant::Dynamic,
            EmbeddingVariant::DynamicNoRedundancy,
            EmbeddingVariant::Plain2d,
        ] {
            arithmetic &= patch_angles(v, span, d).is_ok_and(|t| t.angles.len() == d / 2);
        }
        let single = dynamic_rope_angles(
            PatchSpanCoord {
                x: 3,
                y_start: 2,
                y_end: 2,
            },
            d,
        )
        .unwrap();
        arithmetic &= single.angles[..d / 4] == rope2d_angles(3, 2, d).unwrap().angles[..d / 4];
    }
    arithmetic &= dynamic_rope_angles(
        PatchSpanCoord {
            x: 0,
            y_start: 0,
            y_end: 0,
        },
        40,
    )
    .is_err();
    outcome(
        norm_dev < 1e-5 && offset_dev < 1e-5 && arithmetic,
        format!(
            "norm dev {norm_dev:.2e}, offset dev {offset_dev:.2e}, dims 16..=2048 ok: {arithmetic}"
        ),
    )
}

fn c7_inference(t: &Trained) -> Outcome {
    let total = GRID * GRID;
    let (mut gap, mut calls_ok) = (0.0f64, true);
    let mut ms = Vec::new();
    for g in 0..50u64 {
        let label = t.corpus.samples[g as usize % t.corpus.len()].label;
        let scale = if g % 2 == 0 { 1.0 } else { 2.0 };
        let sc = SamplingConfig {
            seed: g,
            cfg_scale: scale,
            top_k: 8,
            ..SamplingConfig::default()
        };
        let trace = sample(&t.model, &t.entropy, Some(label), GRID, &sc).unwrap();
        gap = gap.max(teacher_forced_gap(&t.model, &trace, Some(label), scale));
        calls_ok &=
            trace.global_calls == trace.partition.num_patches() && trace.global_calls <= total;
        ms.push(trace.partition.clone());
    }
    let stats = partition_stats(&ms).unwrap();
    let predicted = total as f64 / stats.avg_patch_len;
    let rel = (stats.mean_patches - predicted).abs() / predicted;
    outcome(
        gap < 1e-4 && calls_ok && rel < 0.1,
        format!(
            "max prob gap {gap:.2e}, global calls = M: {calls_ok}, mean M {:.2} vs T/P_avg {predicted:.2} ({:.1}%)",
            stats.mean_patches,
            rel * 100.0
        ),
    )
}

fn c8_overfit(t: &Trained) -> Outcome {
    outcome(
        t.accuracy > 0.99 && t.elapsed < Duration::from_secs(15 * 60),
        format!(
            "32 samples, 2000 steps, accuracy {:.4}, {:.1?}",
            t.accuracy, t.elapsed
        ),
    )
}

fn c9_entropy_structure(entropy: &EntropyModel<f32>) -> Outcome {
    let sp = spec();
    let base = 20_000;
    let corpus = Corpus::synthetic(&sp, 500, base).unwrap();
    let mut diffs = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        let layout = synthetic_region_map(&sp, base + i as u64).unwrap();
        let e = entropy_map(entropy, &raster_flatten(&s.grid)).unwrap();
        let (mut edge, mut inner) = (Vec::new(), Vec::new());
        for (j, &v) in e.values().iter().enumerate().skip(1) {
            let (row, col) = (j / sp.width, j % sp.width);
            let left = col > 0 && layout[j - 1] != layout[j];
            let up = row > 0 && layout[j - sp.width] != layout[j];
            if left || up {
                edge.push(v)
            } else {
                inner.push(v)
            }
        }
        if !edge.is_empty() && !inner.is_empty() {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            diffs.push(mean(&edge) - mean(&inner));
        }
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let positive = diffs.iter().filter(|&&d| d > 0.0).count();
    outcome(
        diffs.len() >= 500 && mean > 0.0,
        format!(
            "{} paired samples, mean boundary - interior {mean:.3} nats, {positive} positive",
            diffs.len()
        ),
    )
}

fn c10_flops() -> Outcome {
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
    let ours = estimate_flops(&cfg, 256, 1.81).unwrap().forward_total;
    let ratio = ours / baseline_flops(12, 768, 16384, 256);
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    for i in 0..=300 {
        let f = estimate_flops(&cfg, 256, 1.0 + i as f64 * 0.025)
            .unwrap()
            .forward_total;
        monotone &= f < prev;
        prev = f;
    }
    outcome(
        (0.65..=0.90).contains(&ratio) && monotone,
        format!("ratio {ratio:.4} at T=256, P_avg=1.81; strictly decreasing: {monotone}"),
    )
}

fn c11_sweep(t: &Trained) -> Outcome {
    let held = Corpus::synthetic(&spec(), 32, 30_000).unwrap();
    let cache = compute_entropy_cache(&held, &t.entropy).unwrap();
    let thresholds = [BASE_THRESHOLD, 1.0, 1.5, 2.0, 3.0];
    let rows = threshold_sweep(&t.model, &held, &cache, &thresholds).unwrap();
    let mut valid = true;
    for &th in &thresholds {
        let pcfg = t.model.config().patchifier.with_threshold(th);
        for e in &cache.sequences {
            valid &= partition_ok(&patchify(e.values(), &pcfg).unwrap(), e.len(), &pcfg);
        }
    }
    let monotone = rows
        .windows(2)
        .all(|w| w[1].stats.avg_patch_len >= w[0].stats.avg_patch_len);
    let report: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}: P_avg {:.3} CE {:.3}",
                r.threshold, r.stats.avg_patch_len, r.cross_entropy
            )
        })
        .collect();
    outcome(
        valid && monotone,
        format!("invariants ok: {valid}; {}", report.join(", ")),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let o = f();
        println!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    run(1, "patchifier oracle", &c1_patchifier_oracle);
    run(2, "worked example", &c2_worked_example);
    run(3, "causality leak", &c3_causality);
    run(4, "packed equivalence", &c4_packed);
    run(5, "gradient checks", &c5_gradients);
    run(6, "rope properties", &c6_rope);
    run(10, "flops ratio", &c10_flops);

    let entropy = train_entropy();
    run(9, "entropy structure", &|| c9_entropy_structure(&entropy));
    let trained = overfit(entropy);
    run(8, "overfit", &|| c8_overfit(&trained));
    run(7, "inference consistency", &|| c7_inference(&trained));
    run(11, "threshold sweep", &|| c11_sweep(&trained));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
