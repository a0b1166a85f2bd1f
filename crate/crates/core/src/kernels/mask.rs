//! Attention masks expressed as one contiguous allowed key range per query.
//!
//! All three mask shapes used by the model reduce to intervals: causal
//! (`0..=i`), block-diagonal causal (`block_start..=i`) and block-span
//! (`s_m..=e_m`, patch queries over their own tokens).

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    BlockDiagonalCausal,
    BlockSpan,
}

/// Spans are half-open `(start, end)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    spans: Vec<(usize, usize)>,
    queries: usize,
    keys: usize,
}

impl AttentionMask {
    pub fn causal(len: usize) -> Self {
        Self {
            kind: MaskKind::Causal,
            spans: Vec::new(),
            queries: len,
            keys: len,
        }
    }

    /// Independent causal blocks of the given lengths laid end to end.
    pub fn block_diagonal_causal(lengths: &[usize]) -> Result<Self> {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            if len == 0 {
                return Err(Error::Mask("zero-length block".into()));
            }
            spans.push((start, start + len));
            start += len;
        }
        Ok(Self {
            kind: MaskKind::BlockDiagonalCausal,
            spans,
            queries: start,
            keys: start,
        })
    }

    /// Query `m` attends exactly to keys `spans[m].0 .. spans[m].1`.
    pub fn block_span(spans: Vec<(usize, usize)>, keys: usize) -> Result<Self> {
        let mut prev_end = 0;
        for &(s, e) in &spans {
            if s >= e {
                return Err(Error::Mask(format!("empty span ({s}, {e})")));
            }
            if s < prev_end {
                return Err(Error::Mask("spans overlap or are unsorted".into()));
            }
            if e > keys {
                return Err(Error::Mask(format!("span end {e} exceeds {keys} keys")));
            }
            prev_end = e;
        }
        Ok(Self {
            kind: MaskKind::BlockSpan,
            queries: spans.len(),
            spans,
            keys,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    /// Allowed key range for query `q`.
    pub fn allowed(&self, q: usize) -> Range<usize> {
        match self.kind {
            MaskKind::Causal => 0..q + 1,
            MaskKind::BlockDiagonalCausal => {
                let b = self.spans.partition_point(|&(_, end)| end <= q);
                self.spans[b].0..q + 1
            }
            MaskKind::BlockSpan => self.spans[q].0..self.spans[q].1,
        }
    }

    /// All allowed ranges, validated against the key count.
    pub fn ranges(&self) -> Result<Vec<Range<usize>>> {
        (0..self.queries)
            .map(|q| {
                let r = self.allowed(q);
                if r.is_empty() || r.end > self.keys {
                    Err(Error::Mask(format!("query {q} has no valid keys")))
                } else {
                    Ok(r)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_diagonal_ranges_restart_per_block() {
        let m = AttentionMask::block_diagonal_causal(&[2, 3]).unwrap();
        let r = m.ranges().unwrap();
        assert_eq!(r, vec![0..1, 0..2, 2..3, 2..4, 2..5]);
    }

    #[test]
    fn block_span_rejects_overlap() {
        assert!(AttentionMask::block_span(vec![(0, 2), (1, 3)], 3).is_err());
        assert!(AttentionMask::block_span(vec![(0, 2), (2, 2)], 3).is_err());
        assert!(AttentionMask::block_span(vec![(0, 4)], 3).is_err());
    }
}
