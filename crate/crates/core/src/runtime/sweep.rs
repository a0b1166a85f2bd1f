//! Inference-time threshold sweeps and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::corpus::Corpus;
use crate::entropy::EntropyCache;
use crate::error::{Error, Result};
use crate::kernels::Scalar;
use crate::model::DparModel;
use crate::patchifier::{partition_stats, patchify, PartitionStats};
use crate::runtime::train::{evaluate, StepStats};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub stats: PartitionStats,
    pub cross_entropy: f64,
    pub accuracy: f64,
}

/// Re-patchify `corpus` at each threshold, check every partition against
/// the patchifier's constraints, and measure teacher-forced loss.
pub fn threshold_sweep<F: Scalar>(
    model: &DparModel<F>,
    corpus: &Corpus,
    cache: &EntropyCache,
    thresholds: &[f64],
) -> Result<Vec<SweepRow>> {
    let max = (model.config().vocab_size as f64).ln();
    thresholds
        .iter()
        .map(|&th| {
            if !(th > 0.0 && th < max) {
                return Err(Error::Config(format!(
                    "threshold {th} outside (0, ln V = {max:.4})"
                )));
            }
            let pcfg = model.config().patchifier.with_threshold(th);
            let partitions = cache
                .sequences
                .iter()
                .map(|e| {
                    let p = patchify(e.values(), &pcfg)?;
                    p.validate(&pcfg)?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = partition_stats(&partitions)?;
            let metrics = evaluate(model, corpus, cache, Some(&pcfg))?;
            Ok(SweepRow {
                threshold: th,
                stats,
                cross_entropy: metrics.cross_entropy,
                accuracy: metrics.accuracy,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,p_avg,mean_patches,ce,accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.4},{:.6},{:.6}",
            r.threshold, r.stats.avg_patch_len, r.stats.mean_patches, r.cross_entropy, r.accuracy
        );
    }
    out
}

pub fn loss_csv(history: &[StepStats]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for s in history {
        let _ = writeln!(out, "{},{:.6},{:.6}", s.step, s.loss, s.grad_norm);
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
