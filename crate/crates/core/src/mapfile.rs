//! Portable float maps: `CMAP` magic, u32 grid side, then `G×G` f32,
//! all little-endian, row-major.
//!
//! Several maps may be concatenated in one file (see [`read_maps`]).

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::aggregate::AmbiguityMap;

pub const MAGIC: [u8; 4] = *b"CMAP";
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum MapFileError {
    #[error("bad map magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated map: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("map grid side must be positive")]
    ZeroGrid,
    #[error("map value at index {0} is not finite")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_map<W: Write>(map: &AmbiguityMap, mut sink: W) -> Result<u64, MapFileError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * map.values.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(map.grid_side as u32).to_le_bytes());
    for &v in &map.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

fn parse_one(bytes: &[u8]) -> Result<(AmbiguityMap, usize), MapFileError> {
    if bytes.len() < HEADER_LEN {
        return Err(MapFileError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(MapFileError::BadMagic(magic));
    }
    let g = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if g == 0 {
        return Err(MapFileError::ZeroGrid);
    }
    let total = HEADER_LEN + 4 * g * g;
    if bytes.len() < total {
        return Err(MapFileError::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity(g * g);
    for (i, c) in bytes[HEADER_LEN..total].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(MapFileError::NonFinite(i));
        }
        values.push(v as f64);
    }
    let map = AmbiguityMap::from_values(g, values).expect("length checked above");
    Ok((map, total))
}

/// Reads exactly one map; trailing bytes are an error.
pub fn read_map<R: Read>(mut source: R) -> Result<AmbiguityMap, MapFileError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let (map, used) = parse_one(&bytes)?;
    if used != bytes.len() {
        return Err(MapFileError::Truncated {
            expected: used,
            actual: bytes.len(),
        });
    }
    Ok(map)
}

/// Reads a concatenation of maps until end of stream.
pub fn read_maps<R: Read>(mut source: R) -> Result<Vec<AmbiguityMap>, MapFileError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut rest = bytes.as_slice();
    let mut maps = Vec::new();
    while !rest.is_empty() {
        let (map, used) = parse_one(rest)?;
        maps.push(map);
        rest = &rest[used..];
    }
    Ok(maps)
}
