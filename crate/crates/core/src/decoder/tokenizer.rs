//! Byte-level toy tokenizer with reserved special and location ids.
//!
//! Id layout for vocabulary size `V`:
//!
//! * `0` pad, `1` eos, `2` `<image>`, `3` the `clarify` conditioning token
//! * `4 .. 4 + S` location block, `S = min(1024, (V - 4) / 4)` slots; a
//!   `<locDDDD>` token maps to slot `DDDD · S / 1024`
//! * the remaining ids hold raw bytes, wrapping modulo their count
//!
//! Mapping is deterministic but lossy for small vocabularies, which is fine
//! for a decoder whose weights are random anyway.

use crate::loc::LOC_BINS;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const IMAGE: u32 = 2;
pub const CLARIFY: u32 = 3;
const FIRST_LOC: u32 = 4;

pub const MIN_VOCAB: usize = 16;

const CONDITIONING_WORD: &str = "clarify";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTokenizer {
    vocab_size: u32,
    loc_slots: u32,
}

impl ToyTokenizer {
    /// # Panics
    /// If `vocab_size < 16`; [`super::DecoderConfig::validate`] rejects such
    /// configurations before a tokenizer is built.
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size >= MIN_VOCAB, "vocab_size must be at least {MIN_VOCAB}");
        let vocab_size = vocab_size as u32;
        let loc_slots = ((vocab_size - FIRST_LOC) / 4).min(LOC_BINS as u32);
        Self { vocab_size, loc_slots }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    fn first_byte(&self) -> u32 {
        FIRST_LOC + self.loc_slots
    }

    pub fn loc_id(&self, bin: u16) -> u32 {
        FIRST_LOC + (bin as u32 * self.loc_slots) / LOC_BINS as u32
    }

    pub fn byte_id(&self, byte: u8) -> u32 {
        let slots = self.vocab_size - self.first_byte();
        self.first_byte() + byte as u32 % slots
    }

    pub fn is_loc(&self, id: u32) -> bool {
        (FIRST_LOC..self.first_byte()).contains(&id)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let rest = &bytes[i..];
            if let Some((id, len)) = self.special_at(bytes, i, rest) {
                ids.push(id);
                i += len;
            } else {
                ids.push(self.byte_id(rest[0]));
                i += 1;
            }
        }
        ids
    }

    fn special_at(&self, all: &[u8], at: usize, rest: &[u8]) -> Option<(u32, usize)> {
        for (literal, id) in [(&b"<image>"[..], IMAGE), (b"<eos>", EOS), (b"<pad>", PAD)] {
            if rest.starts_with(literal) {
                return Some((id, literal.len()));
            }
        }
        if let Some(bin) = crate::loc::loc_token_at(rest) {
            return Some((self.loc_id(bin), crate::loc::TOKEN_LEN));
        }
        let word = CONDITIONING_WORD.as_bytes();
        if rest.starts_with(word) {
            let before_ok = at == 0 || !all[at - 1].is_ascii_alphanumeric();
            let after_ok = rest.get(word.len()).is_none_or(|b| !b.is_ascii_alphanumeric());
            if before_ok && after_ok {
                return Some((CLARIFY, word.len()));
            }
        }
        None
    }

    /// Best-effort inverse of [`tokenize`](Self::tokenize), for greedy toy
    /// generation. Location slots decode to the lowest bin they cover.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => {}
                EOS => out.push_str("<eos>"),
                IMAGE => out.push_str("<image>"),
                CLARIFY => out.push_str(CONDITIONING_WORD),
                id if self.is_loc(id) => {
                    let slot = id - FIRST_LOC;
                    let bin = (slot * LOC_BINS as u32).div_ceil(self.loc_slots);
                    out.push_str(&crate::loc::format_loc_token(bin.min(LOC_BINS as u32 - 1) as u16));
                }
                id if id < self.vocab_size => {
                    let byte = (id - self.first_byte()) as u8;
                    if byte.is_ascii() {
                        out.push(byte as char);
                    }
                }
                _ => {}
            }
        }
        out
    }
}
