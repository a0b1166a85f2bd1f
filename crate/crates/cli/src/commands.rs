//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dpar::corpus::{read_token_file, write_token_file, Corpus, LabeledSample};
use dpar::entropy::{build_entropy_cache, train_entropy_model, EntropyCache, EntropyModel};
use dpar::kernels::checkpoint::digest_hex;
use dpar::kernels::Scalar;
use dpar::model::{DparModel, ModelConfig};
use dpar::patchifier::{
    partition_pgm, partition_stats, patchify, PatchPartition, PatchifierConfig,
};
use dpar::runtime::{
    baseline_flops, estimate_flops, load_dpar, load_entropy, loss_csv, sample, save_dpar,
    save_entropy, sweep_csv, threshold_sweep, DparCheckpoint, SampleTrace, SamplingConfig,
    StepStats, Trainer,
};
use dpar::verify::run_suite;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{sibling, RunManifest};
use crate::{Cli, Command};

/// Flag combinations rejected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// One or more invariant checks failed.
#[derive(Debug)]
pub struct SuiteFailure(pub usize);

impl fmt::Display for SuiteFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} invariant check(s) failed", self.0)
    }
}

impl std::error::Error for SuiteFailure {}

fn verify_f64() -> bool {
    std::env::var("DPAR_VERIFY_F64").is_ok_and(|v| v == "1")
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(UsageError("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    let path = cli.config.as_deref();
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(RunConfig::load_or_default(path, "corpus")?, a),
        Command::TrainEntropy(a) => train_entropy(RunConfig::load_or_default(path, "entropy")?, a),
        Command::BuildCache(a) => build_cache(a),
        Command::Train(a) => train(RunConfig::load_or_default(path, "model")?, a),
        Command::Sample(a) => sample_cmd(RunConfig::load_or_default(path, "sampling")?, a),
        Command::Patchify(a) => patchify_cmd(RunConfig::load_or_default(path, "model")?, a),
        Command::Flops(a) => flops(RunConfig::load_or_default(path, "model")?, a),
        Command::SweepThreshold(a) => sweep(a),
        Command::Verify(a) => verify(a),
    }
}

fn gen_corpus(mut cfg: RunConfig, a: crate::GenCorpusArgs) -> Result<()> {
    let c = &mut cfg.corpus;
    set(&mut c.seed, a.seed);
    set(&mut c.count, a.count);
    set(&mut c.height, a.height);
    set(&mut c.width, a.width);
    set(&mut c.vocab_size, a.vocab_size);
    set(&mut c.num_regions, a.regions);
    set(&mut c.noise_rate, a.noise);
    set(&mut c.num_classes, a.classes);
    let corpus = Corpus::synthetic(&c.spec(), c.count, c.seed)?;
    write_token_file(&corpus, &a.out)?;
    println!(
        "wrote {} samples of {}x{} (V={}, {} classes) to {}",
        corpus.len(),
        corpus.height,
        corpus.width,
        corpus.vocab_size,
        corpus.num_classes,
        a.out.display()
    );
    RunManifest::new("gen-corpus", &cfg.corpus)?
        .seed("corpus", cfg.corpus.seed)
        .output("corpus", &a.out)
        .write_beside(&a.out)?;
    Ok(())
}

fn train_entropy(mut cfg: RunConfig, a: crate::TrainEntropyArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    cfg.entropy.vocab_size = corpus.vocab_size;
    let t = &mut cfg.entropy_train;
    set(&mut t.steps, a.steps);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.optimizer.lr, a.lr);
    set(&mut t.seed, a.seed);
    let mut model = EntropyModel::new(cfg.entropy.clone(), t.seed)?;
    let losses = train_entropy_model(&mut model, &corpus, t)?;
    save_entropy(&a.out, &model)?;
    let curve = sibling(&a.out, "losses.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:.6}\n", i + 1));
    }
    fs::write(&curve, csv)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "entropy model: loss {first:.4} -> {last:.4} over {} steps",
            losses.len()
        );
    }
    println!("digest {}", digest_hex(&model.digest()));
    #[derive(Serialize)]
    struct Resolved<'a> {
        entropy: &'a dpar::entropy::EntropyConfig,
        entropy_train: &'a dpar::entropy::EntropyTrainConfig,
    }
    let resolved = Resolved {
        entropy: &cfg.entropy,
        entropy_train: &cfg.entropy_train,
    };
    RunManifest::new("train-entropy", &resolved)?
        .seed("entropy", cfg.entropy_train.seed)
        .input("corpus", &a.corpus)
        .output("model", &a.out)
        .output("losses", &curve)
        .write_beside(&a.out)?;
    Ok(())
}

fn build_cache(a: crate::BuildCacheArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let model = read_entropy(&a.entropy)?;
    let cache = build_entropy_cache(&corpus, &model, &a.out)?;
    let finite: Vec<f64> = cache
        .sequences
        .iter()
        .flat_map(|s| s.values()[1..].iter().copied())
        .collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    println!(
        "cached {} sequences of {} tokens, mean entropy {mean:.4} nats, model {}",
        cache.sequences.len(),
        cache.length,
        digest_hex(&cache.model_digest)
    );
    RunManifest::new("build-cache", model.config())?
        .input("corpus", &a.corpus)
        .input("entropy", &a.entropy)
        .output("cache", &a.out)
        .write_beside(&a.out)?;
    Ok(())
}

fn train(mut cfg: RunConfig, a: crate::TrainArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let cache = read_cache(&a.cache)?;
    if let Some(path) = &a.entropy {
        cache.check_digest(&read_entropy(path)?.digest())?;
    }
    let t = &mut cfg.train;
    set(&mut t.steps, a.steps);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.optimizer.lr, a.lr);
    set(&mut t.seed, a.seed);
    set(&mut t.cfg_drop, a.cfg_drop);
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = read_model(path)?;
            if a.eth.is_some() || a.pmax.is_some() {
                return Err(UsageError("--eth/--pmax cannot change a resumed model".into()).into());
            }
            let mut trainer = Trainer::new(ckpt.model, cfg.train.clone(), corpus.len())?;
            if let Some(opt) = ckpt.optimizer {
                trainer.optimizer = opt;
            }
            trainer.step = ckpt.step as usize;
            trainer
        }
        None => {
            let m = &mut cfg.model;
            m.vocab_size = corpus.vocab_size;
            m.num_classes = corpus.num_classes;
            m.patchifier.row_width = corpus.width;
            set(&mut m.patchifier.entropy_threshold, a.eth);
            set(&mut m.patchifier.max_patch_len, a.pmax);
            let model = DparModel::new(m.clone(), cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone(), corpus.len())?
        }
    };
    cfg.model = trainer.model.config().clone();
    let entropy_digest = Some(digest_hex(&cache.model_digest));
    let every = cfg.train.checkpoint_every;
    let history = trainer.run(&corpus, &cache, |tr, s: &StepStats| {
        if s.step.is_multiple_of(50) || s.step == tr.config.steps {
            log::info!(
                "step {}: loss {:.4}, grad norm {:.3}",
                s.step,
                s.loss,
                s.grad_norm
            );
        }
        if every > 0 && s.step.is_multiple_of(every) {
            save_dpar(
                &a.out,
                &tr.model,
                Some(&tr.optimizer),
                entropy_digest.clone(),
                s.step as u64,
            )?;
        }
        Ok(())
    })?;
    save_dpar(
        &a.out,
        &trainer.model,
        Some(&trainer.optimizer),
        entropy_digest,
        trainer.step as u64,
    )?;
    let curve = sibling(&a.out, "losses.csv");
    fs::write(&curve, loss_csv(&history))?;
    if let Some(last) = history.last() {
        println!("trained to step {}: loss {:.4}", last.step, last.loss);
    } else {
        println!("checkpoint already at step {}", trainer.step);
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        train: &'a dpar::runtime::TrainConfig,
    }
    let mut manifest = RunManifest::new(
        "train",
        &Resolved {
            model: &cfg.model,
            train: &cfg.train,
        },
    )?
    .seed("train", cfg.train.seed)
    .input("corpus", &a.corpus)
    .input("cache", &a.cache)
    .output("model", &a.out)
    .output("losses", &curve);
    if let Some(p) = &a.entropy {
        manifest = manifest.input("entropy", p);
    }
    if let Some(p) = &a.resume {
        manifest = manifest.input("resume", p);
    }
    manifest.write_beside(&a.out)?;
    Ok(())
}

fn generate<F: Scalar>(
    model: &DparModel<F>,
    entropy: &EntropyModel<F>,
    a: &crate::SampleArgs,
    height: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<SampleTrace>> {
    (0..a.count)
        .map(|i| {
            let c = SamplingConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            Ok(sample(model, entropy, a.label, height, &c)?)
        })
        .collect()
}

fn sample_cmd(mut cfg: RunConfig, a: crate::SampleArgs) -> Result<()> {
    let ckpt = read_model(&a.model)?;
    let entropy = read_entropy(&a.entropy)?;
    let found = digest_hex(&entropy.digest());
    if let Some(expected) = &ckpt.entropy_digest {
        if *expected != found {
            bail!(dpar::Error::DigestMismatch {
                expected: expected.clone(),
                found
            });
        }
    }
    let mcfg = ckpt.model.config().clone();
    if let Some(label) = a.label {
        if label as usize >= mcfg.num_classes {
            bail!(dpar::Error::Data(format!(
                "label {label} outside {} classes",
                mcfg.num_classes
            )));
        }
    }
    let s = &mut cfg.sampling;
    set(&mut s.top_k, a.top_k);
    set(&mut s.top_p, a.top_p);
    set(&mut s.temperature, a.temperature);
    set(&mut s.cfg_scale, a.cfg_scale);
    set(&mut s.seed, a.seed);
    if a.eth.is_some() {
        s.entropy_threshold = a.eth;
    }
    let width = mcfg.patchifier.row_width;
    let height = a.height.unwrap_or(width);
    let wide = verify_f64();
    let traces = if wide {
        generate(
            &ckpt.model.cast::<f64>(),
            &entropy.cast::<f64>(),
            &a,
            height,
            s,
        )?
    } else {
        generate(&ckpt.model, &entropy, &a, height, s)?
    };
    // unconditional samples are stored under class 0
    let mut out = Corpus::new(height, width, mcfg.vocab_size, mcfg.num_classes);
    let mut lines = String::new();
    for t in &traces {
        out.push(LabeledSample {
            grid: dpar::corpus::TokenGrid::new(height, width, mcfg.vocab_size, t.tokens.clone())?,
            label: a.label.unwrap_or(0),
        })?;
        lines.push_str(&t.partition.dump_line());
        lines.push('\n');
    }
    write_token_file(&out, &a.out)?;
    let parts = sibling(&a.out, "partitions.txt");
    fs::write(&parts, lines)?;
    let partitions: Vec<PatchPartition> = traces.iter().map(|t| t.partition.clone()).collect();
    let stats = partition_stats(&partitions)?;
    println!(
        "generated {} grids of {height}x{width}: mean patches {:.2}, P_avg {:.3}, global calls {}",
        traces.len(),
        stats.mean_patches,
        stats.avg_patch_len,
        traces.iter().map(|t| t.global_calls).sum::<usize>()
    );
    #[derive(Serialize)]
    struct Resolved<'a> {
        sampling: &'a SamplingConfig,
        label: Option<u32>,
        count: usize,
        height: usize,
        f64: bool,
    }
    RunManifest::new(
        "sample",
        &Resolved {
            sampling: &cfg.sampling,
            label: a.label,
            count: a.count,
            height,
            f64: wide,
        },
    )?
    .seed("sampling", cfg.sampling.seed)
    .input("model", &a.model)
    .input("entropy", &a.entropy)
    .output("grids", &a.out)
    .output("partitions", &parts)
    .write_beside(&a.out)?;
    Ok(())
}

fn patchify_cmd(cfg: RunConfig, a: crate::PatchifyArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let cache = read_cache(&a.cache)?;
    if cache.sequences.len() != corpus.len() || cache.length != corpus.seq_len() {
        bail!(dpar::Error::Data(format!(
            "cache holds {} sequences of {} tokens, corpus has {} of {}",
            cache.sequences.len(),
            cache.length,
            corpus.len(),
            corpus.seq_len()
        )));
    }
    let mut p: PatchifierConfig = cfg.model.patchifier.clone();
    p.row_width = a.row_width.unwrap_or(corpus.width);
    set(&mut p.entropy_threshold, a.eth);
    set(&mut p.max_patch_len, a.pmax);
    p.entropy_gating &= !a.no_gating;
    p.max_length &= !a.no_max_length;
    p.row_reset &= !a.no_row_reset;
    p.validate()?;
    let partitions = cache
        .sequences
        .iter()
        .map(|e| {
            let part = patchify(e.values(), &p)?;
            part.validate(&p)?;
            Ok(part)
        })
        .collect::<dpar::Result<Vec<_>>>()?;
    let stats = partition_stats(&partitions)?;
    if a.stats || (a.dump.is_none() && a.pgm_dir.is_none()) {
        println!("samples {}", stats.num_samples);
        println!("M {:.4}", stats.mean_patches);
        println!("P_avg {:.4}", stats.avg_patch_len);
        println!("histogram");
        for (len, count) in &stats.histogram {
            println!("  {len}: {count}");
        }
    }
    let mut manifest = RunManifest::new("patchify", &p)?
        .input("corpus", &a.corpus)
        .input("cache", &a.cache);
    let mut primary = None;
    if let Some(path) = &a.dump {
        let text: String = partitions.iter().map(|q| q.dump_line() + "\n").collect();
        fs::write(path, text)?;
        manifest = manifest.output("dump", path);
        primary = Some(path.clone());
    }
    if let Some(dir) = &a.pgm_dir {
        fs::create_dir_all(dir)?;
        let max = (corpus.vocab_size as f64).ln();
        for (i, (e, part)) in cache
            .sequences
            .iter()
            .zip(&partitions)
            .take(a.pgm_limit)
            .enumerate()
        {
            let bytes = partition_pgm(e.values(), part, corpus.width, 8, max)?;
            fs::write(dir.join(format!("sample_{i:04}.pgm")), bytes)?;
        }
        manifest = manifest.output("pgm_dir", dir);
        primary.get_or_insert_with(|| dir.join("patchify"));
    }
    if let Some(primary) = primary {
        manifest.write_beside(&primary)?;
    }
    Ok(())
}

fn flops(cfg: RunConfig, a: crate::FlopsArgs) -> Result<()> {
    let m = &cfg.model;
    m.validate()?;
    let report = estimate_flops(m, a.tokens, a.pavg)?;
    let layers = a
        .baseline_layers
        .unwrap_or(m.encoder_layers + m.global_layers + m.decoder_layers);
    let base = baseline_flops(layers, m.hidden, m.vocab_size, a.tokens);
    println!("tokens {}", report.tokens);
    println!("patches {:.4}", report.patches);
    println!("encoder {:.6e}", report.encoder);
    println!("pooling {:.6e}", report.pooling);
    println!("global {:.6e}", report.global);
    println!("decoder {:.6e}", report.decoder);
    println!("head {:.6e}", report.head);
    println!("forward_total {:.6e}", report.forward_total);
    println!("training_total {:.6e}", report.training_total);
    println!("baseline_{layers}_layers {base:.6e}");
    println!("ratio {:.4}", report.forward_total / base);
    Ok(())
}

fn sweep(a: crate::SweepArgs) -> Result<()> {
    let ckpt = read_model(&a.model)?;
    let corpus = read_corpus(&a.corpus)?;
    let cache = read_cache(&a.cache)?;
    if let Some(expected) = &ckpt.entropy_digest {
        let found = digest_hex(&cache.model_digest);
        if *expected != found {
            bail!(dpar::Error::DigestMismatch {
                expected: expected.clone(),
                found
            });
        }
    }
    let rows = if verify_f64() {
        threshold_sweep(&ckpt.model.cast::<f64>(), &corpus, &cache, &a.thresholds)?
    } else {
        threshold_sweep(&ckpt.model, &corpus, &cache, &a.thresholds)?
    };
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::write(out, &csv)?;
        RunManifest::new("sweep-threshold", &a.thresholds)?
            .input("model", &a.model)
            .input("corpus", &a.corpus)
            .input("cache", &a.cache)
            .output("csv", out)
            .write_beside(out)?;
    }
    Ok(())
}

fn verify(a: crate::VerifyArgs) -> Result<()> {
    let wide = verify_f64();
    println!("precision: {}", if wide { "f64" } else { "f32" });
    let checks = run_suite(wide, a.seed)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", c.name, c.detail);
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        return Err(SuiteFailure(failed).into());
    }
    Ok(())
}

fn read_corpus(p: &Path) -> Result<Corpus> {
    read_token_file(p).with_context(|| format!("reading corpus {}", p.display()))
}

fn read_cache(p: &Path) -> Result<EntropyCache> {
    EntropyCache::load(p).with_context(|| format!("reading entropy cache {}", p.display()))
}

fn read_entropy(p: &Path) -> Result<EntropyModel> {
    load_entropy(p).with_context(|| format!("reading entropy model {}", p.display()))
}

fn read_model(p: &Path) -> Result<DparCheckpoint> {
    load_dpar(p).with_context(|| format!("reading checkpoint {}", p.display()))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
