//! Bounding boxes as `<locDDDD>` location tokens.
//!
//! A box is four tokens ordered `(y_min, x_min, y_max, x_max)`. Each
//! coordinate in `[0, 1]` is quantised into one of 1024 bins; bin index 1024
//! is never produced or accepted. Decoding returns bin centres.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Usable bins `0..=1023`.
pub const LOC_BINS: usize = 1024;
/// Byte length of one `<locDDDD>` token.
pub const TOKEN_LEN: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum LocError {
    #[error("coordinate {0} outside [0, 1]")]
    CoordinateOutOfRange(f64),
    #[error("box ordering violated: {0}")]
    Ordering(String),
    #[error("location bin {0} outside 0..=1023")]
    BinOutOfRange(u16),
}

/// Box in normalised image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxNorm {
    pub y_min: f64,
    pub x_min: f64,
    pub y_max: f64,
    pub x_max: f64,
}

impl BoxNorm {
    pub fn new(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> Result<Self, LocError> {
        let b = Self {
            y_min,
            x_min,
            y_max,
            x_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, LocError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.y_min, self.x_min, self.y_max, self.x_max]
    }

    pub fn validate(&self) -> Result<(), LocError> {
        for c in self.to_array() {
            if !(0.0..=1.0).contains(&c) {
                return Err(LocError::CoordinateOutOfRange(c));
            }
        }
        if self.y_min > self.y_max || self.x_min > self.x_max {
            return Err(LocError::Ordering(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.y_max - self.y_min) * (self.x_max - self.x_min)
    }
}

/// Quantised box, bins ordered `(y_min, x_min, y_max, x_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LocQuad([u16; 4]);

impl LocQuad {
    pub fn new(bins: [u16; 4]) -> Result<Self, LocError> {
        if let Some(&b) = bins.iter().find(|&&b| b as usize >= LOC_BINS) {
            return Err(LocError::BinOutOfRange(b));
        }
        if bins[0] > bins[2] || bins[1] > bins[3] {
            return Err(LocError::Ordering(format!("{bins:?}")));
        }
        Ok(Self(bins))
    }

    pub fn bins(&self) -> [u16; 4] {
        self.0
    }

    pub fn to_tokens(&self) -> String {
        self.0.iter().map(|&b| format_loc_token(b)).collect()
    }
}

/// `min(floor(c · 1024), 1023)`.
pub fn quantize(c: f64) -> Result<u16, LocError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(LocError::CoordinateOutOfRange(c));
    }
    Ok(((c * LOC_BINS as f64).floor() as usize).min(LOC_BINS - 1) as u16)
}

/// Bin centre `(k + 0.5) / 1024`.
pub fn dequantize(bin: u16) -> f64 {
    (bin as f64 + 0.5) / LOC_BINS as f64
}

pub fn format_loc_token(bin: u16) -> String {
    format!("<loc{bin:04}>")
}

pub fn quantize_box(b: &BoxNorm) -> Result<LocQuad, LocError> {
    b.validate()?;
    let mut bins = [0u16; 4];
    for (bin, c) in bins.iter_mut().zip(b.to_array()) {
        *bin = quantize(c)?;
    }
    // quantize is monotone, so ordering carries over
    LocQuad::new(bins)
}

pub fn encode_box(b: &BoxNorm) -> Result<String, LocError> {
    Ok(quantize_box(b)?.to_tokens())
}

pub fn decode_box(q: LocQuad) -> BoxNorm {
    let [y0, x0, y1, x1] = q.0;
    BoxNorm {
        y_min: dequantize(y0),
        x_min: dequantize(x0),
        y_max: dequantize(y1),
        x_max: dequantize(x1),
    }
}

/// Bin of a well-formed token at the very start of `bytes`.
///
/// Exactly `<loc` + four ASCII digits + `>`, value at most 1023.
pub fn loc_token_at(bytes: &[u8]) -> Option<u16> {
    let t = bytes.get(..TOKEN_LEN)?;
    if &t[..4] != b"<loc" || t[8] != b'>' {
        return None;
    }
    let mut value = 0u16;
    for &d in &t[4..8] {
        if !d.is_ascii_digit() {
            return None;
        }
        value = value * 10 + (d - b'0') as u16;
    }
    ((value as usize) < LOC_BINS).then_some(value)
}

/// First valid quad in `text`.
///
/// Tokens are grouped into runs of directly adjacent tokens. Every window of
/// four consecutive tokens inside a run is tried in scan order; windows that
/// violate box ordering are skipped. Returns `None` when no window is valid.
pub fn parse_loc_sequence(text: &str) -> Option<LocQuad> {
    let bytes = text.as_bytes();
    let mut run: Vec<u16> = Vec::new();
    let mut i = 0;
    loop {
        let token = if i < bytes.len() {
            loc_token_at(&bytes[i..])
        } else {
            None
        };
        match token {
            Some(bin) => {
                run.push(bin);
                if run.len() >= 4 {
                    let w = &run[run.len() - 4..];
                    if let Ok(q) = LocQuad::new([w[0], w[1], w[2], w[3]]) {
                        return Some(q);
                    }
                }
                i += TOKEN_LEN;
            }
            None => {
                if i >= bytes.len() {
                    return None;
                }
                run.clear();
                i += 1;
            }
        }
    }
}
