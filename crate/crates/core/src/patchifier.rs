//! Entropy-gated segmentation of a raster sequence into contiguous patches.
//!
//! Token 0 always forms a patch by itself and token 1 always opens the next
//! one. From token 2 on, a token joins the open patch when its entropy is at
//! most the threshold, the patch is shorter than the length cap, and the token
//! does not start a grid row. Each of the three gates can be switched off for
//! ablations; with entropy gating off the sequence is chunked statically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn enabled() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchifierConfig {
    pub entropy_threshold: f64,
    pub max_patch_len: usize,
    pub row_width: usize,
    #[serde(default = "enabled")]
    pub entropy_gating: bool,
    #[serde(default = "enabled")]
    pub max_length: bool,
    #[serde(default = "enabled")]
    pub row_reset: bool,
}

impl PatchifierConfig {
    pub fn new(entropy_threshold: f64, max_patch_len: usize, row_width: usize) -> Self {
        Self {
            entropy_threshold,
            max_patch_len,
            row_width,
            entropy_gating: true,
            max_length: true,
            row_reset: true,
        }
    }

    pub fn with_threshold(&self, entropy_threshold: f64) -> Self {
        Self {
            entropy_threshold,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_patch_len == 0 {
            return Err(Error::Config("max_patch_len must be at least 1".into()));
        }
        if self.row_width == 0 {
            return Err(Error::Config("row_width must be at least 1".into()));
        }
        if self.entropy_threshold.is_nan() {
            return Err(Error::Config("entropy threshold is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Extend,
    NewPatch,
}

/// Whether token `t` extends the open patch of length `current_len`.
///
/// Under entropy gating, positions 0 and 1 always open a new patch.
pub fn incremental_decision(
    entropy: f64,
    current_len: usize,
    t: usize,
    cfg: &PatchifierConfig,
) -> Decision {
    let forced = if cfg.entropy_gating { t <= 1 } else { t == 0 };
    let gate = !cfg.entropy_gating || entropy <= cfg.entropy_threshold;
    let room = !cfg.max_length || current_len < cfg.max_patch_len;
    let mid_row = !cfg.row_reset || !t.is_multiple_of(cfg.row_width);
    if !forced && gate && room && mid_row {
        Decision::Extend
    } else {
        Decision::NewPatch
    }
}

/// Ordered, contiguous, non-overlapping inclusive spans covering `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPartition {
    spans: Vec<(usize, usize)>,
    len: usize,
}

impl PatchPartition {
    /// Build from inclusive spans, checking that they tile `0..len`.
    pub fn from_spans(spans: Vec<(usize, usize)>) -> Result<Self> {
        let mut next = 0;
        for &(s, e) in &spans {
            if s != next || e < s {
                return Err(Error::Data(format!(
                    "span {s}:{e} does not continue a tiling at {next}"
                )));
            }
            next = e + 1;
        }
        if next == 0 {
            return Err(Error::Data("partition has no spans".into()));
        }
        Ok(Self { spans, len: next })
    }

    pub fn singletons(len: usize) -> Result<Self> {
        Self::from_spans((0..len).map(|i| (i, i)).collect())
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    /// Half-open token ranges, one per patch.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        self.spans.iter().map(|&(s, e)| s..e + 1).collect()
    }

    pub fn num_patches(&self) -> usize {
        self.spans.len()
    }

    pub fn covered_len(&self) -> usize {
        self.len
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans.iter().map(|&(s, e)| e - s + 1)
    }

    /// Patch index of every token.
    pub fn patch_of(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len);
        for (m, &(s, e)) in self.spans.iter().enumerate() {
            out.extend(std::iter::repeat_n(m, e - s + 1));
        }
        out
    }

    /// Check the length cap and row constraints of `cfg`.
    pub fn validate(&self, cfg: &PatchifierConfig) -> Result<()> {
        for &(s, e) in &self.spans {
            if cfg.max_length && e - s + 1 > cfg.max_patch_len {
                return Err(Error::Data(format!(
                    "span {s}:{e} exceeds max length {}",
                    cfg.max_patch_len
                )));
            }
            if cfg.row_reset && s / cfg.row_width != e / cfg.row_width {
                return Err(Error::Data(format!(
                    "span {s}:{e} crosses a row of width {}",
                    cfg.row_width
                )));
            }
        }
        Ok(())
    }

    /// `s:e` pairs separated by spaces.
    pub fn dump_line(&self) -> String {
        let mut line = String::new();
        for (i, &(s, e)) in self.spans.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{s}:{e}");
        }
        line
    }

    pub fn parse_dump_line(line: &str) -> Result<Self> {
        let spans = line
            .split_whitespace()
            .map(|pair| {
                let (s, e) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad span {pair:?}")))?;
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad span {pair:?}")))
                };
                Ok((parse(s)?, parse(e)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_spans(spans)
    }
}

fn check_entropies(entropies: &[f64], cfg: &PatchifierConfig) -> Result<()> {
    cfg.validate()?;
    if entropies.is_empty() {
        return Err(Error::Data("cannot patchify an empty sequence".into()));
    }
    if cfg.entropy_gating && entropies[0] != f64::INFINITY {
        return Err(Error::Data(format!(
            "first entropy must be the +inf sentinel, got {}",
            entropies[0]
        )));
    }
    if let Some(i) = entropies.iter().position(|e| e.is_nan()) {
        return Err(Error::Data(format!("entropy at {i} is NaN")));
    }
    Ok(())
}

pub fn patchify(entropies: &[f64], cfg: &PatchifierConfig) -> Result<PatchPartition> {
    check_entropies(entropies, cfg)?;
    let t_len = entropies.len();
    if !cfg.entropy_gating {
        return static_patchify(t_len, cfg.max_patch_len, cfg);
    }
    let mut spans = vec![(0, 0)];
    if t_len == 1 {
        return PatchPartition::from_spans(spans);
    }
    let mut start = 1;
    for (i, &e) in entropies.iter().enumerate().skip(2) {
        let len = i - start;
        let joins = e <= cfg.entropy_threshold
            && (!cfg.max_length || len < cfg.max_patch_len)
            && (!cfg.row_reset || i % cfg.row_width != 0);
        if !joins {
            spans.push((start, i - 1));
            start = i;
        }
    }
    spans.push((start, t_len - 1));
    PatchPartition::from_spans(spans)
}

/// Fixed-length chunks from index 0, cut short at row ends when row resets
/// are enabled. With the length cap disabled each chunk spans a full row.
pub fn static_patchify(
    len: usize,
    fixed_len: usize,
    cfg: &PatchifierConfig,
) -> Result<PatchPartition> {
    if fixed_len == 0 {
        return Err(Error::Config(
            "fixed patch length must be at least 1".into(),
        ));
    }
    if len == 0 {
        return Err(Error::Data("cannot patchify an empty sequence".into()));
    }
    let cap = if cfg.max_length {
        fixed_len
    } else {
        usize::MAX
    };
    let mut spans = Vec::new();
    let mut s = 0;
    while s < len {
        let mut e = s.saturating_add(cap - 1).min(len - 1);
        if cfg.row_reset {
            e = e.min((s / cfg.row_width + 1) * cfg.row_width - 1);
        }
        spans.push((s, e));
        s = e + 1;
    }
    PatchPartition::from_spans(spans)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionStats {
    pub num_samples: usize,
    pub mean_patches: f64,
    /// Mean over samples of `T / M`.
    pub avg_patch_len: f64,
    /// Span length -> count.
    pub histogram: BTreeMap<usize, usize>,
    pub generation_steps: f64,
}

pub fn partition_stats(partitions: &[PatchPartition]) -> Result<PartitionStats> {
    if partitions.is_empty() {
        return Err(Error::Data("no partitions to summarize".into()));
    }
    let n = partitions.len() as f64;
    let mut histogram = BTreeMap::new();
    let mut patches = 0.0;
    let mut ratio = 0.0;
    for p in partitions {
        patches += p.num_patches() as f64;
        ratio += p.covered_len() as f64 / p.num_patches() as f64;
        for l in p.lengths() {
            *histogram.entry(l).or_insert(0) += 1;
        }
    }
    Ok(PartitionStats {
        num_samples: partitions.len(),
        mean_patches: patches / n,
        avg_patch_len: ratio / n,
        histogram,
        generation_steps: patches / n,
    })
}

/// Binary PGM heatmap of per-token entropies, `cell` pixels per token, with
/// black patch boundaries. The sentinel and values above `max_entropy` render
/// white.
pub fn partition_pgm(
    entropies: &[f64],
    partition: &PatchPartition,
    width: usize,
    cell: usize,
    max_entropy: f64,
) -> Result<Vec<u8>> {
    if width == 0 || cell < 3 {
        return Err(Error::Config("PGM needs width >= 1 and cell >= 3".into()));
    }
    if entropies.len() != partition.covered_len() || !entropies.len().is_multiple_of(width) {
        return Err(Error::Shape(format!(
            "{} entropies for a partition of {} tokens at width {width}",
            entropies.len(),
            partition.covered_len()
        )));
    }
    let rows = entropies.len() / width;
    let (pw, ph) = (width * cell, rows * cell);
    let patch_of = partition.patch_of();
    let mut pixels = vec![0u8; pw * ph];
    for (i, &e) in entropies.iter().enumerate() {
        let level = if e.is_finite() && max_entropy > 0.0 {
            (e / max_entropy).clamp(0.0, 1.0)
        } else {
            1.0
        };
        // keep interiors off pure black so outlines stay visible
        let grey = 32 + (level * 223.0).round() as u8;
        let (r, c) = (i / width, i % width);
        let starts = c == 0 || patch_of[i - 1] != patch_of[i];
        let ends = c == width - 1 || patch_of[i + 1] != patch_of[i];
        for dy in 0..cell {
            for dx in 0..cell {
                let border =
                    dy == 0 || dy == cell - 1 || (starts && dx == 0) || (ends && dx == cell - 1);
                pixels[(r * cell + dy) * pw + c * cell + dx] = if border { 0 } else { grey };
            }
        }
    }
    let mut out = format!("P5\n{pw} {ph}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
