//! Prefix-LM attention mask.

use super::{DecoderError, TokenSequence};

/// Square boolean matrix; `allowed(i, j)` means query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }
}

/// Image and prefix positions see the whole image+prefix block in both
/// directions; suffix position `i` additionally sees suffix positions `<= i`.
pub fn build_mask(seq: &TokenSequence) -> Result<AttentionMask, DecoderError> {
    let size = seq.len();
    if size == 0 {
        return Err(DecoderError::EmptySequence);
    }
    let prefix_end = seq.prefix_end();
    let mut allowed = vec![false; size * size];
    for i in 0..size {
        let visible = if i < prefix_end { prefix_end } else { i + 1 };
        allowed[i * size..i * size + visible].fill(true);
    }
    Ok(AttentionMask { size, allowed })
}
