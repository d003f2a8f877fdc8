//! CAT1: single-layer attention tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size        | field                                         |
//! |--------|-------------|-----------------------------------------------|
//! | 0      | 4           | magic `CAT1`                                  |
//! | 4      | 2           | version (u16, currently 1)                    |
//! | 6      | 4           | layer_index (u32)                             |
//! | 10     | 4           | H, number of heads (u32)                      |
//! | 14     | 4           | Q, number of queries (u32)                    |
//! | 18     | 4           | K, number of keys (u32)                       |
//! | 22     | 4           | L_img, number of image keys (u32)             |
//! | 26     | 4           | string table length in bytes (u32, 0 = none)  |
//! | 30     | 34          | reserved, zero                                |
//! | 64     | 4·H·Q·K     | f32 payload ordered `[head][query][key]`      |
//! | ..     | Q           | role codes (0 content, 1 conditioning, 2 eos, 3 pad, 4 image) |
//! | ..     | table length| string table: u32 count, then per string u32 byte length + UTF-8 |
//!
//! The total size is always `64 + 4·H·Q·K + Q + table length`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::tensor::{validate_tensor, AttentionTensor, QueryRole, TensorError, TokenMeta, Violation};

pub const MAGIC: [u8; 4] = *b"CAT1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"CAT1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported CAT1 version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated CAT1 stream: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("CAT1 header announces {expected} bytes but stream holds {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("invalid CAT1 header: {0}")]
    InvalidHeader(String),
    #[error("invalid value in payload: {0}")]
    InvalidValue(Violation),
    #[error("invalid role code {code} at query {query}")]
    BadRoleCode { query: usize, code: u8 },
    #[error("malformed string table: {0}")]
    StringTable(String),
    #[error("tensor violates its invariants: {0}")]
    InvalidTensor(Violation),
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Decoded fixed-size header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub layer_index: u32,
    pub num_heads: u32,
    pub num_queries: u32,
    pub num_keys: u32,
    pub num_image_tokens: u32,
    pub string_table_len: u32,
}

impl Header {
    pub fn payload_len(&self) -> Option<u64> {
        (self.num_heads as u64)
            .checked_mul(self.num_queries as u64)?
            .checked_mul(self.num_keys as u64)?
            .checked_mul(4)
    }

    /// Exact file size implied by the header.
    pub fn file_len(&self) -> Option<u64> {
        (HEADER_LEN as u64)
            .checked_add(self.payload_len()?)?
            .checked_add(self.num_queries as u64)?
            .checked_add(self.string_table_len as u64)
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..6].copy_from_slice(&self.version.to_le_bytes());
        let fields = [
            self.layer_index,
            self.num_heads,
            self.num_queries,
            self.num_keys,
            self.num_image_tokens,
            self.string_table_len,
        ];
        for (i, field) in fields.iter().enumerate() {
            let at = 6 + 4 * i;
            buf[at..at + 4].copy_from_slice(&field.to_le_bytes());
        }
        buf
    }

    pub fn decode(buf: &[u8; HEADER_LEN]) -> Result<Self, FormatError> {
        let found = [buf[0], buf[1], buf[2], buf[3]];
        if found != MAGIC {
            return Err(FormatError::BadMagic { found });
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let u32_at = |at: usize| u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]);
        let header = Self {
            version,
            layer_index: u32_at(6),
            num_heads: u32_at(10),
            num_queries: u32_at(14),
            num_keys: u32_at(18),
            num_image_tokens: u32_at(22),
            string_table_len: u32_at(26),
        };
        if buf[30..].iter().any(|&b| b != 0) {
            return Err(FormatError::InvalidHeader("reserved bytes are not zero".into()));
        }
        if header.num_heads == 0 || header.num_queries == 0 {
            return Err(FormatError::InvalidHeader(format!(
                "H={} and Q={} must both be at least 1",
                header.num_heads, header.num_queries
            )));
        }
        if header.num_image_tokens > header.num_keys {
            return Err(FormatError::InvalidHeader(format!(
                "L_img={} exceeds K={}",
                header.num_image_tokens, header.num_keys
            )));
        }
        if header.file_len().is_none() {
            return Err(FormatError::InvalidHeader("dimensions overflow".into()));
        }
        Ok(header)
    }
}

fn to_u32(value: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(value).map_err(|_| FormatError::InvalidHeader(format!("{what}={value} does not fit in u32")))
}

fn encode_string_table(strings: &[String]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(&to_u32(strings.len(), "string count")?.to_le_bytes());
    for s in strings {
        out.extend_from_slice(&to_u32(s.len(), "string length")?.to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    Ok(out)
}

fn decode_string_table(mut bytes: &[u8]) -> Result<Vec<String>, FormatError> {
    fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], FormatError> {
        if bytes.len() < n {
            return Err(FormatError::StringTable(format!(
                "needs {n} more bytes, {} left",
                bytes.len()
            )));
        }
        let (head, tail) = bytes.split_at(n);
        *bytes = tail;
        Ok(head)
    }
    let read_u32 = |bytes: &mut &[u8]| -> Result<usize, FormatError> {
        let b = take(bytes, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    };
    let count = read_u32(&mut bytes)?;
    let mut strings = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = read_u32(&mut bytes)?;
        let raw = take(&mut bytes, len)?;
        let s =
            std::str::from_utf8(raw).map_err(|e| FormatError::StringTable(format!("entry {i} is not UTF-8: {e}")))?;
        strings.push(s.to_owned());
    }
    if !bytes.is_empty() {
        return Err(FormatError::StringTable(format!("{} trailing bytes", bytes.len())));
    }
    Ok(strings)
}

/// Serialises `t` and `m` as CAT1 and returns the number of bytes written.
///
/// Output is a pure function of the inputs. Tensors with NaN, infinite or
/// negative values are refused.
pub fn write_tensor<W: Write>(t: &AttentionTensor, m: &TokenMeta, mut sink: W) -> Result<u64, FormatError> {
    t.check_meta(m)?;
    if let Some(v) = validate_tensor(t, false).violations.into_iter().next() {
        return Err(FormatError::InvalidTensor(v));
    }
    let table = match &m.text_strings {
        Some(strings) => encode_string_table(strings)?,
        None => Vec::new(),
    };
    let header = Header {
        version: VERSION,
        layer_index: t.layer_index(),
        num_heads: to_u32(t.num_heads(), "H")?,
        num_queries: to_u32(t.num_queries(), "Q")?,
        num_keys: to_u32(t.num_keys(), "K")?,
        num_image_tokens: to_u32(t.num_image_tokens(), "L_img")?,
        string_table_len: to_u32(table.len(), "string table length")?,
    };

    sink.write_all(&header.encode())?;
    let mut payload = Vec::with_capacity(t.values().len() * 4);
    for v in t.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    let roles: Vec<u8> = m.query_roles.iter().map(|r| r.code()).collect();
    sink.write_all(&roles)?;
    sink.write_all(&table)?;
    sink.flush()?;
    Ok((HEADER_LEN + payload.len() + roles.len() + table.len()) as u64)
}

/// Reads one CAT1 tensor, validating every header field against the bytes
/// that follow it. The stream must end exactly where the header says.
pub fn read_tensor<R: Read>(mut source: R) -> Result<(AttentionTensor, TokenMeta), FormatError> {
    let mut head = [0u8; HEADER_LEN];
    let got = read_up_to(&mut source, &mut head)?;
    if got >= 4 && head[0..4] != MAGIC {
        return Err(FormatError::BadMagic {
            found: [head[0], head[1], head[2], head[3]],
        });
    }
    if got < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual: got as u64,
        });
    }
    let header = Header::decode(&head)?;
    // file_len was checked for overflow in decode
    let expected = header.file_len().unwrap_or(u64::MAX);

    let mut rest = Vec::new();
    source.read_to_end(&mut rest)?;
    let actual = HEADER_LEN as u64 + rest.len() as u64;
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::LengthMismatch { expected, actual });
    }

    let (h, q, k) = (
        header.num_heads as usize,
        header.num_queries as usize,
        header.num_keys as usize,
    );
    let payload_len = 4 * h * q * k;
    let (payload, tail) = rest.split_at(payload_len);
    let (role_bytes, table) = tail.split_at(q);

    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let tensor = AttentionTensor::new(header.layer_index, h, q, k, header.num_image_tokens as usize, values)?;
    if let Some(v) = validate_tensor(&tensor, false).violations.into_iter().next() {
        return Err(FormatError::InvalidValue(v));
    }

    let query_roles = role_bytes
        .iter()
        .enumerate()
        .map(|(query, &code)| QueryRole::from_code(code).ok_or(FormatError::BadRoleCode { query, code }))
        .collect::<Result<Vec<_>, _>>()?;
    let text_strings = if header.string_table_len == 0 {
        None
    } else {
        Some(decode_string_table(table)?)
    };
    Ok((
        tensor,
        TokenMeta {
            query_roles,
            text_strings,
        },
    ))
}

/// Reads only the header, e.g. for `inspect`.
pub fn read_header<R: Read>(mut source: R) -> Result<Header, FormatError> {
    let mut head = [0u8; HEADER_LEN];
    let got = read_up_to(&mut source, &mut head)?;
    if got < HEADER_LEN {
        if got >= 4 && head[0..4] != MAGIC {
            return Err(FormatError::BadMagic {
                found: [head[0], head[1], head[2], head[3]],
            });
        }
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual: got as u64,
        });
    }
    Header::decode(&head)
}

fn read_up_to<R: Read>(source: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
