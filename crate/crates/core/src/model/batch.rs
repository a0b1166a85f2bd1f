//! Packing variable-length sequences into one padding-free batch.

use std::ops::Range;

use crate::corpus::LabeledSample;
use crate::entropy::EntropySequence;
use crate::error::{Error, Result};
use crate::kernels::AttentionMask;
use crate::model::ModelConfig;
use crate::patchifier::{patchify, PatchPartition, PatchifierConfig};
use crate::positional::{patch_angle_rows, token_angle_rows, PatchSpanCoord};

/// One sequence. The model reads `[BOS] + context`; output row `j` predicts
/// grid token `j`, and the partition is over those `context.len() + 1` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInput {
    pub context: Vec<u32>,
    pub partition: PatchPartition,
    /// `None` selects the null condition.
    pub label: Option<u32>,
    pub targets: Option<Vec<u32>>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.context.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Teacher-forced input for a full grid: patchify its cached entropies and
/// shift the tokens behind BOS.
pub fn training_input(
    sample: &LabeledSample,
    entropies: &EntropySequence,
    cfg: &PatchifierConfig,
    drop_condition: bool,
) -> Result<SequenceInput> {
    let tokens = sample.grid.tokens();
    if entropies.len() != tokens.len() {
        return Err(Error::Data(format!(
            "{} entropies for a sample of {} tokens",
            entropies.len(),
            tokens.len()
        )));
    }
    Ok(SequenceInput {
        context: tokens[..tokens.len() - 1].to_vec(),
        partition: patchify(entropies.values(), cfg)?,
        label: (!drop_condition).then_some(sample.label),
        targets: Some(tokens.to_vec()),
    })
}

/// Concatenated sequences with offsets and the masks of all three stages.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub token_ids: Vec<usize>,
    pub targets: Option<Vec<usize>>,
    pub token_offsets: Vec<usize>,
    pub patch_offsets: Vec<usize>,
    pub patch_ranges: Vec<Range<usize>>,
    /// Global patch index of every token row.
    pub patch_of: Vec<usize>,
    /// Class row per sample, the null class included.
    pub conditions: Vec<usize>,
    /// Rows of `[conditions; patch states]` that form the global input.
    pub global_index: Vec<usize>,
    pub token_angles: Vec<f64>,
    pub global_angles: Vec<f64>,
    pub token_mask: AttentionMask,
    pub patch_mask: AttentionMask,
    pub global_mask: AttentionMask,
}

impl PackedBatch {
    pub fn num_samples(&self) -> usize {
        self.token_offsets.len() - 1
    }

    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patch_ranges.len()
    }

    pub fn token_range(&self, b: usize) -> Range<usize> {
        self.token_offsets[b]..self.token_offsets[b + 1]
    }

    pub fn patch_range(&self, b: usize) -> Range<usize> {
        self.patch_offsets[b]..self.patch_offsets[b + 1]
    }
}

fn check_tokens(tokens: &[u32], vocab: usize, what: &str) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Data(format!(
            "{what} token {t} outside vocabulary {vocab}"
        )));
    }
    Ok(())
}

fn overflow() -> Error {
    Error::Data("packed batch offsets overflow".into())
}

pub fn pack_batch(inputs: &[SequenceInput], cfg: &ModelConfig) -> Result<PackedBatch> {
    if inputs.is_empty() {
        return Err(Error::Data("cannot pack an empty batch".into()));
    }
    let width = cfg.patchifier.row_width;
    let d = cfg.head_dim();
    let with_targets = inputs[0].targets.is_some();
    let n_samples = inputs.len();

    let mut token_ids = Vec::new();
    let mut targets = Vec::new();
    let mut token_offsets = vec![0usize];
    let mut patch_offsets = vec![0usize];
    let mut patch_ranges = Vec::new();
    let mut patch_of = Vec::new();
    let mut conditions = Vec::with_capacity(n_samples);
    let mut global_index = Vec::new();
    let mut token_coords = Vec::new();
    let mut global_spans = Vec::new();
    let mut token_lengths = Vec::with_capacity(n_samples);
    let mut patch_counts = Vec::with_capacity(n_samples);

    for (b, input) in inputs.iter().enumerate() {
        let n = input.len();
        check_tokens(&input.context, cfg.vocab_size, "context")?;
        if input.partition.covered_len() != n {
            return Err(Error::Shape(format!(
                "partition covers {} positions, sequence has {n}",
                input.partition.covered_len()
            )));
        }
        match (&input.targets, with_targets) {
            (Some(t), true) => {
                if t.len() != n {
                    return Err(Error::Shape(format!(
                        "{} targets for {n} positions",
                        t.len()
                    )));
                }
                check_tokens(t, cfg.vocab_size, "target")?;
                targets.extend(t.iter().map(|&x| x as usize));
            }
            (None, false) => {}
            _ => {
                return Err(Error::Data(
                    "targets must be given for all samples or none".into(),
                ))
            }
        }
        let class = match input.label {
            Some(c) if c as usize >= cfg.num_classes => {
                return Err(Error::Data(format!(
                    "label {c} outside {} classes",
                    cfg.num_classes
                )))
            }
            Some(c) => c as usize,
            None => cfg.num_classes,
        };
        conditions.push(class);

        let t0 = *token_offsets.last().expect("non-empty");
        let p0 = *patch_offsets.last().expect("non-empty");
        token_ids.push(cfg.vocab_size);
        token_ids.extend(input.context.iter().map(|&x| x as usize));
        token_coords.extend((0..n).map(|j| ((j / width) as i64, (j % width) as i64)));

        let spans = input.partition.spans();
        global_index.push(b);
        global_spans.push(PatchSpanCoord {
            x: -1,
            y_start: 0,
            y_end: 0,
        });
        for (m, &(s, e)) in spans.iter().enumerate() {
            patch_ranges.push(t0 + s..t0 + e + 1);
            patch_of.extend(std::iter::repeat_n(p0 + m, e - s + 1));
            if m + 1 < spans.len() {
                global_index.push(n_samples + p0 + m);
                let y_start = (s % width) as i64;
                global_spans.push(PatchSpanCoord {
                    x: (s / width) as i64,
                    y_start,
                    y_end: y_start + (e - s) as i64,
                });
            }
        }
        token_lengths.push(n);
        patch_counts.push(spans.len());
        token_offsets.push(t0.checked_add(n).ok_or_else(overflow)?);
        patch_offsets.push(p0.checked_add(spans.len()).ok_or_else(overflow)?);
    }

    let total_tokens = token_ids.len();
    let mask_spans = patch_ranges.iter().map(|r| (r.start, r.end)).collect();
    Ok(PackedBatch {
        token_ids,
        targets: with_targets.then_some(targets),
        token_offsets,
        patch_offsets,
        patch_of,
        conditions,
        global_index,
        token_angles: token_angle_rows(&token_coords, d)?,
        global_angles: patch_angle_rows(cfg.embedding_variant, &global_spans, d)?,
        token_mask: AttentionMask::block_diagonal_causal(&token_lengths)?,
        patch_mask: AttentionMask::block_span(mask_spans, total_tokens)?,
        global_mask: AttentionMask::block_diagonal_causal(&patch_counts)?,
        patch_ranges,
    })
}
