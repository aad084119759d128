//! Self-attention masks for every decoding variant.
//!
//! Row `i` lists the positions query `i` may attend to. Forbidden cells are
//! applied after the query-key product (their softmax weight is exactly zero).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                allowed.push(f(i, j));
            }
        }
        Self { len, allowed }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.len + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.len..(row + 1) * self.len]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// Position-to-block map for block-causal attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAssignment {
    block_of: Vec<usize>,
}

impl BlockAssignment {
    pub fn new(block_of: Vec<usize>) -> Result<Self> {
        if let Some(&first) = block_of.first() {
            if first != 0 {
                return Err(Error::InvalidArgument(format!(
                    "block ids must start at 0, got {first}"
                )));
            }
        }
        for (i, pair) in block_of.windows(2).enumerate() {
            if pair[1] != pair[0] && pair[1] != pair[0] + 1 {
                return Err(Error::InvalidArgument(format!(
                    "non-monotone block assignment at position {}: {} -> {}",
                    i + 1,
                    pair[0],
                    pair[1]
                )));
            }
        }
        Ok(Self { block_of })
    }

    /// Consecutive blocks of `size` positions.
    pub fn uniform(len: usize, size: usize) -> Self {
        let size = size.max(1);
        Self {
            block_of: (0..len).map(|p| p / size).collect(),
        }
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    pub fn len(&self) -> usize {
        self.block_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_of.is_empty()
    }

    /// Appends a new block of `count` positions.
    pub fn push_block(&mut self, count: usize) {
        let next = self.block_of.last().map_or(0, |b| b + 1);
        self.block_of.extend(std::iter::repeat_n(next, count));
    }
}

pub fn causal_mask(len: usize) -> AttentionMask {
    AttentionMask::from_fn(len, |i, j| j <= i)
}

pub fn windowed_mask(len: usize, window: usize) -> AttentionMask {
    let w = window.max(1);
    AttentionMask::from_fn(len, |i, j| j / w <= i / w)
}

pub fn blocks_mask(blocks: &BlockAssignment) -> AttentionMask {
    let b = blocks.block_of();
    AttentionMask::from_fn(b.len(), |i, j| b[j] <= b[i])
}

/// Layout of a two-stage sequence: `n_stage1` line-start positions followed
/// by per-line completion positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineLayout {
    pub n_stage1: usize,
    /// Line id of every stage-2 position.
    pub line_of: Vec<usize>,
    /// Offset within its line of every stage-2 position.
    pub pos_in_line: Vec<usize>,
}

impl LineLayout {
    pub fn len(&self) -> usize {
        self.n_stage1 + self.line_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn fasterdan_mask(layout: &LineLayout) -> Result<AttentionMask> {
    let LineLayout {
        n_stage1,
        line_of,
        pos_in_line,
    } = layout;
    if line_of.len() != pos_in_line.len() {
        return Err(Error::InvalidArgument(format!(
            "line map has {} entries but offset map has {}",
            line_of.len(),
            pos_in_line.len()
        )));
    }
    let mut seen: Vec<(usize, usize)> = line_of
        .iter()
        .copied()
        .zip(pos_in_line.iter().copied())
        .collect();
    seen.sort_unstable();
    if seen.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::InvalidArgument(
            "two stage-2 positions share a (line, offset) pair".into(),
        ));
    }
    let n1 = *n_stage1;
    let mask = AttentionMask::from_fn(layout.len(), |i, j| match (i < n1, j < n1) {
        (true, true) => j <= i,
        (true, false) => false,
        (false, true) => true,
        (false, false) => {
            let (a, b) = (i - n1, j - n1);
            line_of[a] == line_of[b] && pos_in_line[b] <= pos_in_line[a]
        }
    });
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_examples() {
        let m = causal_mask(3);
        assert_eq!(m.count_allowed(), 6);
        assert_eq!(m.row(0), &[true, false, false]);
        assert_eq!(m, windowed_mask(3, 1));
    }

    #[test]
    fn windowed_examples() {
        let m = windowed_mask(6, 3);
        assert_eq!(m.row(2), &[true, true, true, false, false, false]);
        assert_eq!(m.row(4), &[true; 6]);
        assert_eq!(windowed_mask(5, 5).count_allowed(), 25);
        for l in 1..10 {
            assert_eq!(windowed_mask(l, 1), causal_mask(l));
        }
    }

    #[test]
    fn blocks_examples() {
        let b = BlockAssignment::new(vec![0, 0, 0, 1, 1, 1]).unwrap();
        assert_eq!(blocks_mask(&b), windowed_mask(6, 3));
        let b = BlockAssignment::new(vec![0, 1, 2]).unwrap();
        assert_eq!(blocks_mask(&b), causal_mask(3));
        let b = BlockAssignment::new(vec![0, 0, 1, 1, 1, 1, 2]).unwrap();
        let m = blocks_mask(&b);
        assert_eq!(m.row(6), &[true; 7]);
        for i in 2..6 {
            assert_eq!(m.row(i), &[true, true, true, true, true, true, false]);
        }
        assert!(BlockAssignment::new(vec![0, 2]).is_err());
        assert!(BlockAssignment::new(vec![0, 1, 0]).is_err());
        assert!(BlockAssignment::new(vec![1, 1]).is_err());
    }

    #[test]
    fn uniform_blocks_match_windowed() {
        for l in 1..20 {
            for w in 1..6 {
                assert_eq!(
                    blocks_mask(&BlockAssignment::uniform(l, w)),
                    windowed_mask(l, w)
                );
            }
        }
        let mut b = BlockAssignment::uniform(3, 3);
        b.push_block(4);
        assert_eq!(b.block_of(), &[0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn windowed_has_more_interactions() {
        for l in 2..30 {
            for w in 2..6 {
                assert!(windowed_mask(l, w).count_allowed() > causal_mask(l).count_allowed());
            }
        }
    }

    #[test]
    fn fasterdan_two_lines() {
        // stage 1: <s>, first char of line 0, first char of line 1
        let layout = LineLayout {
            n_stage1: 3,
            line_of: vec![0, 0, 1, 1, 1],
            pos_in_line: vec![0, 1, 0, 1, 2],
        };
        let m = fasterdan_mask(&layout).unwrap();
        for i in 3..8 {
            assert!((0..3).all(|j| m.allows(i, j)));
        }
        for i in 3..5 {
            for j in 5..8 {
                assert!(!m.allows(i, j));
                assert!(!m.allows(j, i));
            }
        }
        assert!(m.allows(7, 5) && m.allows(7, 6) && !m.allows(5, 6));
        for i in 0..3 {
            assert!((3..8).all(|j| !m.allows(i, j)));
        }
    }

    #[test]
    fn fasterdan_single_line_is_causal() {
        let layout = LineLayout {
            n_stage1: 2,
            line_of: vec![0; 5],
            pos_in_line: (0..5).collect(),
        };
        assert_eq!(fasterdan_mask(&layout).unwrap(), causal_mask(7));
    }

    #[test]
    fn fasterdan_rejects_inconsistent_layout() {
        let bad = LineLayout {
            n_stage1: 2,
            line_of: vec![0, 0],
            pos_in_line: vec![0],
        };
        assert!(fasterdan_mask(&bad).is_err());
        let dup = LineLayout {
            n_stage1: 2,
            line_of: vec![0, 0],
            pos_in_line: vec![1, 1],
        };
        assert!(fasterdan_mask(&dup).is_err());
    }
}
