//! Probe parameter files.
//!
//! Little-endian: magic `CLPB`, u16 version, u16 zero, u32 grid side, eight
//! u32 tensor lengths (conv1_w, conv1_b, conv2_w, conv2_b, fc1_w, fc1_b,
//! fc2_w, fc2_b), then every tensor as f32 in that order.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ProbeError, ProbeParams, TENSOR_NAMES};

const MAGIC: [u8; 4] = *b"CLPB";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ParamsFileError {
    #[error("bad params magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported params version {0}")]
    UnsupportedVersion(u16),
    #[error("tensor {name} has {actual} values, expected {expected}")]
    TensorLength {
        name: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("params file length {actual} does not match header ({expected})")]
    Length { expected: usize, actual: usize },
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_params<W: Write>(p: &ProbeParams, mut sink: W) -> Result<u64, ParamsFileError> {
    let mut buf = Vec::with_capacity(44 + 4 * p.num_params());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(p.grid_side as u32).to_le_bytes());
    for t in p.tensors() {
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
    }
    for t in p.tensors() {
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

pub fn read_params<R: Read>(mut source: R) -> Result<ProbeParams, ParamsFileError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    const HEADER: usize = 12 + 4 * 8;
    if bytes.len() < HEADER {
        return Err(ParamsFileError::Length {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    let u32_at = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(ParamsFileError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ParamsFileError::UnsupportedVersion(version));
    }
    let mut params = ProbeParams::zeros(u32_at(8))?;
    let expected_lens = ProbeParams::tensor_lens(params.grid_side);
    for (i, &expected) in expected_lens.iter().enumerate() {
        let actual = u32_at(12 + 4 * i);
        if actual != expected {
            return Err(ParamsFileError::TensorLength {
                name: TENSOR_NAMES[i],
                expected,
                actual,
            });
        }
    }
    let total = HEADER + 4 * expected_lens.iter().sum::<usize>();
    if bytes.len() != total {
        return Err(ParamsFileError::Length {
            expected: total,
            actual: bytes.len(),
        });
    }
    let mut at = HEADER;
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        for v in t.iter_mut() {
            let x = f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            if !x.is_finite() {
                return Err(ParamsFileError::NonFinite(TENSOR_NAMES[i]));
            }
            *v = x as f64;
            at += 4;
        }
    }
    Ok(params)
}
