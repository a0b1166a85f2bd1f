//! Rotary angle schedules: 2D RoPE for tokens and Dynamic RoPE for patches.
//!
//! An angle table holds `d/2` angles per position; angle `k` rotates the
//! component pair `(v[2k], v[2k+1])` of every head. The coordinate
//! convention is `x = row`, `y = column`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AngleTable {
    pub head_dim: usize,
    pub angles: Vec<f64>,
}

/// Row plus first and last column of a patch that lies within one row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpanCoord {
    pub x: i64,
    pub y_start: i64,
    pub y_end: i64,
}

/// Positional scheme used by the patch transformer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingVariant {
    /// `[x, y_s, y_e, y_e, y_s]` groups.
    #[default]
    Dynamic,
    /// `[x, y_s, y_e]` groups at `d/8` frequencies each for the columns.
    DynamicNoRedundancy,
    /// Plain 2D RoPE at the patch's first token.
    Plain2d,
}

fn frequencies(count: usize, exponent_scale: f64, d: usize) -> impl Iterator<Item = f64> {
    (0..count).map(move |i| ROPE_BASE.powf(-exponent_scale * i as f64 / d as f64))
}

/// `ω_i = 10000^{-4(i-1)/d}` for `i = 1..d/4`.
pub fn token_frequencies(d: usize) -> Vec<f64> {
    frequencies(d / 4, 4.0, d).collect()
}

/// `α_i = 10000^{-16(i-1)/d}` for `i = 1..d/16`.
pub fn span_frequencies(d: usize) -> Vec<f64> {
    frequencies(d / 16, 16.0, d).collect()
}

/// 2D RoPE angles: `d/4` angles `ω_i·x` followed by `d/4` angles `ω_i·y`.
pub fn rope2d_angles(x: i64, y: i64, d: usize) -> Result<AngleTable> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2D RoPE head dim {d} not divisible by 4"
        )));
    }
    let w = token_frequencies(d);
    let mut angles = Vec::with_capacity(d / 2);
    angles.extend(w.iter().map(|f| f * x as f64));
    angles.extend(w.iter().map(|f| f * y as f64));
    Ok(AngleTable {
        head_dim: d,
        angles,
    })
}

/// Dynamic RoPE angles: `d/4` angles `ω_i·x`, then four `d/16` groups
/// `α_i·y_s`, `α_i·y_e`, `α_i·y_e`, `α_i·y_s`.
pub fn dynamic_rope_angles(span: PatchSpanCoord, d: usize) -> Result<AngleTable> {
    if d == 0 || !d.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "Dynamic RoPE head dim {d} not divisible by 16"
        )));
    }
    check_span(span)?;
    let w = token_frequencies(d);
    let a = span_frequencies(d);
    let mut angles = Vec::with_capacity(d / 2);
    angles.extend(w.iter().map(|f| f * span.x as f64));
    for y in [span.y_start, span.y_end, span.y_end, span.y_start] {
        angles.extend(a.iter().map(|f| f * y as f64));
    }
    Ok(AngleTable {
        head_dim: d,
        angles,
    })
}

/// Dynamic RoPE without the repeated groups: `d/4` row angles, then `d/8`
/// angles each for `y_s` and `y_e` at `10000^{-8(i-1)/d}`.
pub fn dynamic_rope_angles_no_redundancy(span: PatchSpanCoord, d: usize) -> Result<AngleTable> {
    if d == 0 || !d.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "Dynamic RoPE head dim {d} not divisible by 16"
        )));
    }
    check_span(span)?;
    let w = token_frequencies(d);
    let b: Vec<f64> = frequencies(d / 8, 8.0, d).collect();
    let mut angles = Vec::with_capacity(d / 2);
    angles.extend(w.iter().map(|f| f * span.x as f64));
    for y in [span.y_start, span.y_end] {
        angles.extend(b.iter().map(|f| f * y as f64));
    }
    Ok(AngleTable {
        head_dim: d,
        angles,
    })
}

pub fn patch_angles(
    variant: EmbeddingVariant,
    span: PatchSpanCoord,
    d: usize,
) -> Result<AngleTable> {
    match variant {
        EmbeddingVariant::Dynamic => dynamic_rope_angles(span, d),
        EmbeddingVariant::DynamicNoRedundancy => dynamic_rope_angles_no_redundancy(span, d),
        EmbeddingVariant::Plain2d => {
            check_span(span)?;
            rope2d_angles(span.x, span.y_start, d)
        }
    }
}

fn check_span(span: PatchSpanCoord) -> Result<()> {
    if span.y_start > span.y_end {
        return Err(Error::Config(format!(
            "patch span starts at column {} after it ends at {}",
            span.y_start, span.y_end
        )));
    }
    Ok(())
}

/// Rotates each consecutive pair `(v[2k], v[2k+1])` by `angles[k]`.
pub fn apply_rotary(v: &[f64], table: &AngleTable) -> Result<Vec<f64>> {
    if v.len() != 2 * table.angles.len() {
        return Err(Error::Shape(format!(
            "vector of dim {} against {} angles",
            v.len(),
            table.angles.len()
        )));
    }
    let mut out = v.to_vec();
    for (pair, &a) in out.chunks_exact_mut(2).zip(&table.angles) {
        let (s, c) = a.sin_cos();
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = c * x0 - s * x1;
        pair[1] = s * x0 + c * x1;
    }
    Ok(out)
}

/// Flattened per-row angles for a sequence of token coordinates.
pub fn token_angle_rows(coords: &[(i64, i64)], d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len() * d / 2);
    for &(x, y) in coords {
        out.extend(rope2d_angles(x, y, d)?.angles);
    }
    Ok(out)
}

/// Flattened per-row angles for a sequence of patch spans.
pub fn patch_angle_rows(
    variant: EmbeddingVariant,
    spans: &[PatchSpanCoord],
    d: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spans.len() * d / 2);
    for &s in spans {
        out.extend(patch_angles(variant, s, d)?.angles);
    }
    Ok(out)
}
