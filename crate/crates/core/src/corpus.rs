//! Token grids, the synthetic region corpus, and the `DPTK` token file.
//!
//! File layout (all little-endian):
//!
//! ```text
//! "DPTK" | version u16 | height u16 | width u16 | vocab u32 | num_classes u16 | count u32
//! then per sample: label u16, height*width tokens as u16
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"DPTK";
pub const TOKEN_VERSION: u16 = 1;
pub const TOKEN_HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    vocab_size: usize,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, vocab_size: usize, tokens: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty grid {height}x{width}")));
        }
        if tokens.len() != height * width {
            return Err(Error::Data(format!(
                "{} tokens for a {height}x{width} grid",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Data(format!(
                "token {t} outside vocabulary {vocab_size}"
            )));
        }
        Ok(Self {
            height,
            width,
            vocab_size,
            tokens,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.width + col]
    }
}

/// Raster-order view: index `i` sits at `(i / width, i % width)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterSequence {
    pub tokens: Vec<u32>,
    pub coords: Vec<(usize, usize)>,
    pub width: usize,
}

impl RasterSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Regroup into rows of `width`.
    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.tokens
            .chunks(self.width)
            .map(<[u32]>::to_vec)
            .collect()
    }
}

pub fn raster_flatten(grid: &TokenGrid) -> RasterSequence {
    let w = grid.width;
    RasterSequence {
        tokens: grid.tokens.clone(),
        coords: (0..grid.len()).map(|i| (i / w, i % w)).collect(),
        width: w,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub grid: TokenGrid,
    pub label: u32,
}

/// A set of samples sharing grid dimensions, vocabulary and label space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub samples: Vec<LabeledSample>,
}

impl Corpus {
    pub fn new(height: usize, width: usize, vocab_size: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            vocab_size,
            num_classes,
            samples: Vec::new(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: LabeledSample) -> Result<()> {
        let g = &sample.grid;
        if g.height != self.height || g.width != self.width || g.vocab_size != self.vocab_size {
            return Err(Error::Data(format!(
                "sample {}x{} V={} does not match corpus {}x{} V={}",
                g.height, g.width, g.vocab_size, self.height, self.width, self.vocab_size
            )));
        }
        if sample.label as usize >= self.num_classes {
            return Err(Error::Data(format!(
                "label {} outside {} classes",
                sample.label, self.num_classes
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Generate `count` samples with seeds `base_seed, base_seed + 1, ...`.
    pub fn synthetic(spec: &SyntheticSpec, count: usize, base_seed: u64) -> Result<Self> {
        let mut corpus = Self::new(spec.height, spec.width, spec.vocab_size, spec.num_classes);
        for i in 0..count {
            corpus.push(generate_synthetic_grid(
                spec,
                base_seed.wrapping_add(i as u64),
            )?)?;
        }
        Ok(corpus)
    }

    /// Split off the trailing `n` samples.
    pub fn split_tail(mut self, n: usize) -> (Corpus, Corpus) {
        let cut = self.samples.len().saturating_sub(n);
        let tail = self.samples.split_off(cut);
        let mut held = Corpus::new(self.height, self.width, self.vocab_size, self.num_classes);
        held.samples = tail;
        (self, held)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub num_regions: usize,
    pub noise_rate: f64,
    pub num_classes: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if self.vocab_size == 0 || self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config(format!(
                "vocab size {} must be in 1..=65536",
                self.vocab_size
            )));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return Err(Error::Config(format!(
                "num_classes {} must be in 1..=65535",
                self.num_classes
            )));
        }
        if self.num_regions == 0 {
            return Err(Error::Config("num_regions must be at least 1".into()));
        }
        if self.num_regions > self.height * self.width {
            return Err(Error::Config(format!(
                "{} regions do not fit a {}x{} grid",
                self.num_regions, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

impl Rect {
    fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Region id of every cell, by guillotine-splitting the grid `n` times.
pub fn region_layout(
    height: usize,
    width: usize,
    num_regions: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut rects = vec![Rect {
        top: 0,
        left: 0,
        height,
        width,
    }];
    while rects.len() < num_regions {
        let splittable: Vec<usize> = (0..rects.len()).filter(|&i| rects[i].area() >= 2).collect();
        // area-weighted choice keeps regions from degenerating into slivers
        let total: usize = splittable.iter().map(|&i| rects[i].area()).sum();
        let mut pick = rng.random_range(0..total);
        let mut chosen = splittable[0];
        for &i in &splittable {
            let a = rects[i].area();
            if pick < a {
                chosen = i;
                break;
            }
            pick -= a;
        }
        let r = rects[chosen];
        let horizontal = if r.height < 2 {
            false
        } else if r.width < 2 {
            true
        } else {
            rng.random_bool(r.height as f64 / (r.height + r.width) as f64)
        };
        let (a, b) = if horizontal {
            let cut = rng.random_range(1..r.height);
            (
                Rect { height: cut, ..r },
                Rect {
                    top: r.top + cut,
                    height: r.height - cut,
                    ..r
                },
            )
        } else {
            let cut = rng.random_range(1..r.width);
            (
                Rect { width: cut, ..r },
                Rect {
                    left: r.left + cut,
                    width: r.width - cut,
                    ..r
                },
            )
        };
        rects[chosen] = a;
        rects.push(b);
    }
    let mut layout = vec![0; height * width];
    for (id, r) in rects.iter().enumerate() {
        for row in r.top..r.top + r.height {
            for col in r.left..r.left + r.width {
                layout[row * width + col] = id;
            }
        }
    }
    layout
}

/// FNV-1a over the sorted region tokens, reduced modulo `num_classes`.
fn label_for(region_tokens: &[u32], num_classes: usize) -> u32 {
    let mut sorted = region_tokens.to_vec();
    sorted.sort_unstable();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in sorted {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    (h % num_classes as u64) as u32
}

/// A grid of `num_regions` rectangles, each filled with one token, then
/// perturbed: each cell is replaced by a different uniform token with
/// probability `noise_rate`.
pub fn generate_synthetic_grid(spec: &SyntheticSpec, seed: u64) -> Result<LabeledSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = region_layout(spec.height, spec.width, spec.num_regions, &mut rng);
    let v = spec.vocab_size as u32;
    let region_tokens: Vec<u32> = if spec.vocab_size >= spec.num_regions {
        rand::seq::index::sample(&mut rng, spec.vocab_size, spec.num_regions)
            .into_iter()
            .map(|t| t as u32)
            .collect()
    } else {
        (0..spec.num_regions)
            .map(|_| rng.random_range(0..v))
            .collect()
    };
    let mut tokens: Vec<u32> = layout.iter().map(|&r| region_tokens[r]).collect();
    if spec.noise_rate > 0.0 && v > 1 {
        for t in &mut tokens {
            if rng.random_bool(spec.noise_rate) {
                let mut other = rng.random_range(0..v - 1);
                if other >= *t {
                    other += 1;
                }
                *t = other;
            }
        }
    }
    let label = label_for(&region_tokens, spec.num_classes);
    Ok(LabeledSample {
        grid: TokenGrid::new(spec.height, spec.width, spec.vocab_size, tokens)?,
        label,
    })
}

/// The noise-free region token of every cell, for diagnostics.
pub fn synthetic_region_map(spec: &SyntheticSpec, seed: u64) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(region_layout(
        spec.height,
        spec.width,
        spec.num_regions,
        &mut rng,
    ))
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in u16")))
}

pub fn encode_token_file(corpus: &Corpus) -> Result<Vec<u8>> {
    let per = 2 + 2 * corpus.seq_len();
    let mut buf = Vec::with_capacity(TOKEN_HEADER_LEN + per * corpus.len());
    buf.extend_from_slice(TOKEN_MAGIC);
    buf.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim_u16(corpus.height, "height")?.to_le_bytes());
    buf.extend_from_slice(&dim_u16(corpus.width, "width")?.to_le_bytes());
    if corpus.vocab_size > u16::MAX as usize + 1 {
        return Err(Error::Data(format!(
            "vocabulary {} exceeds 16-bit token storage",
            corpus.vocab_size
        )));
    }
    buf.extend_from_slice(&(corpus.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&dim_u16(corpus.num_classes, "num_classes")?.to_le_bytes());
    let count = u32::try_from(corpus.len()).map_err(|_| Error::Data("too many samples".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for s in &corpus.samples {
        buf.extend_from_slice(&dim_u16(s.label as usize, "label")?.to_le_bytes());
        for &t in s.grid.tokens() {
            buf.extend_from_slice(&(t as u16).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_token_file(bytes: &[u8]) -> Result<Corpus> {
    if bytes.len() < TOKEN_HEADER_LEN {
        return Err(Error::Format("token file truncated in header".into()));
    }
    if &bytes[..4] != TOKEN_MAGIC {
        return Err(Error::Format("token file magic mismatch".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at =
        |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != TOKEN_VERSION {
        return Err(Error::Format(format!(
            "unsupported token file version {version}"
        )));
    }
    let height = u16_at(6) as usize;
    let width = u16_at(8) as usize;
    let vocab = u32_at(10) as usize;
    let num_classes = u16_at(14) as usize;
    let count = u32_at(16) as usize;
    let per = 2 + 2 * height * width;
    let expected = TOKEN_HEADER_LEN + per * count;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "token file truncated: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "token file has {} trailing bytes",
            bytes.len() - expected
        )));
    }
    let mut corpus = Corpus::new(height, width, vocab, num_classes);
    for i in 0..count {
        let base = TOKEN_HEADER_LEN + i * per;
        let label = u16_at(base) as u32;
        let tokens: Vec<u32> = (0..height * width)
            .map(|j| u16_at(base + 2 + 2 * j) as u32)
            .collect();
        let grid = TokenGrid::new(height, width, vocab, tokens)?;
        corpus.push(LabeledSample { grid, label })?;
    }
    Ok(corpus)
}

pub fn write_token_file(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_token_file(corpus)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_token_file(path: impl AsRef<Path>) -> Result<Corpus> {
    decode_token_file(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: usize, w: usize, v: usize, regions: usize, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            height: h,
            width: w,
            vocab_size: v,
            num_regions: regions,
            noise_rate: noise,
            num_classes: 10,
        }
    }

    #[test]
    fn single_region_without_noise_is_constant() {
        let s = generate_synthetic_grid(&spec(4, 4, 16, 1, 0.0), 7).unwrap();
        let first = s.grid.tokens()[0];
        assert_eq!(s.grid.len(), 16);
        assert!(s.grid.tokens().iter().all(|&t| t == first));
    }

    #[test]
    fn generation_is_deterministic() {
        let sp = spec(8, 8, 32, 3, 0.1);
        assert_eq!(
            generate_synthetic_grid(&sp, 42).unwrap(),
            generate_synthetic_grid(&sp, 42).unwrap()
        );
    }

    #[test]
    fn layout_has_requested_region_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=12 {
            let layout = region_layout(4, 3, n, &mut rng);
            let mut ids = layout.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), n);
        }
    }

    #[test]
    fn too_many_regions_rejected() {
        assert!(generate_synthetic_grid(&spec(2, 2, 16, 5, 0.0), 0).is_err());
        assert!(generate_synthetic_grid(&spec(2, 2, 16, 0, 0.0), 0).is_err());
        assert!(generate_synthetic_grid(&spec(2, 2, 16, 1, 1.5), 0).is_err());
    }

    #[test]
    fn raster_coordinates() {
        let g = TokenGrid::new(3, 2, 10, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let r = raster_flatten(&g);
        assert_eq!(r.coords[4], (2, 0));
        let g = TokenGrid::new(2, 2, 10, vec![7, 8, 9, 1]).unwrap();
        let r = raster_flatten(&g);
        assert_eq!(r.tokens, vec![7, 8, 9, 1]);
        assert_eq!(r.coords, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let one = raster_flatten(&TokenGrid::new(1, 1, 2, vec![1]).unwrap());
        assert_eq!(one.coords, vec![(0, 0)]);
    }

    #[test]
    fn token_encoding_is_little_endian_u16() {
        let mut c = Corpus::new(1, 1, 512, 3);
        c.push(LabeledSample {
            grid: TokenGrid::new(1, 1, 512, vec![300]).unwrap(),
            label: 2,
        })
        .unwrap();
        let bytes = encode_token_file(&c).unwrap();
        assert_eq!(&bytes[TOKEN_HEADER_LEN..], &[2, 0, 0x2C, 0x01]);
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let c = Corpus::new(4, 4, 16, 2);
        let bytes = encode_token_file(&c).unwrap();
        assert_eq!(bytes.len(), TOKEN_HEADER_LEN);
        assert_eq!(decode_token_file(&bytes).unwrap(), c);
    }

    #[test]
    fn decode_errors() {
        let c = Corpus::synthetic(&spec(2, 2, 8, 2, 0.0), 3, 0).unwrap();
        let bytes = encode_token_file(&c).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_token_file(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_token_file(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut oov = bytes.clone();
        let tok = TOKEN_HEADER_LEN + 2;
        oov[tok..tok + 2].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(decode_token_file(&oov), Err(Error::Data(_))));
    }
}
