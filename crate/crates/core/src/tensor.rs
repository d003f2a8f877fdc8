//! In-memory attention tensors and their per-query token metadata.

use std::fmt;

use thiserror::Error;

/// Tolerance on softmax row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("tensor needs at least one head and one query (got H={heads}, Q={queries})")]
    EmptyDimension { heads: usize, queries: usize },
    #[error("image token count {image} exceeds key count {keys}")]
    ImageTokensExceedKeys { image: usize, keys: usize },
    #[error("value buffer holds {actual} entries, shape H×Q×K requires {expected}")]
    ValueCount { expected: usize, actual: usize },
    #[error("token metadata has {roles} roles for {queries} queries")]
    RoleCount { roles: usize, queries: usize },
}

/// Role tag of one query position.
///
/// Only `Content` queries take part in aggregation; the rest form the
/// excluded set (conditioning token, eos, pad) or are image positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum QueryRole {
    Content = 0,
    Conditioning = 1,
    Eos = 2,
    Pad = 3,
    Image = 4,
}

impl QueryRole {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::Content,
            1 => Self::Conditioning,
            2 => Self::Eos,
            3 => Self::Pad,
            4 => Self::Image,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Content => "content",
            Self::Conditioning => "conditioning",
            Self::Eos => "eos",
            Self::Pad => "pad",
            Self::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMeta {
    pub query_roles: Vec<QueryRole>,
    pub text_strings: Option<Vec<String>>,
}

impl TokenMeta {
    pub fn new(query_roles: Vec<QueryRole>) -> Self {
        Self {
            query_roles,
            text_strings: None,
        }
    }

    pub fn with_strings(mut self, strings: Vec<String>) -> Self {
        self.text_strings = Some(strings);
        self
    }

    pub fn len(&self) -> usize {
        self.query_roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_roles.is_empty()
    }
}

/// Raw attention weights of one decoder block, shape `H×Q×K`, stored
/// row-major as `[head][query][key]`.
///
/// The first `num_image_tokens` keys are image patches. Construction only
/// checks the shape; value-level invariants are reported by [`validate_tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layer_index: u32,
    num_heads: usize,
    num_queries: usize,
    num_keys: usize,
    num_image_tokens: usize,
    values: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(
        layer_index: u32,
        num_heads: usize,
        num_queries: usize,
        num_keys: usize,
        num_image_tokens: usize,
        values: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if num_heads == 0 || num_queries == 0 {
            return Err(TensorError::EmptyDimension {
                heads: num_heads,
                queries: num_queries,
            });
        }
        if num_image_tokens > num_keys {
            return Err(TensorError::ImageTokensExceedKeys {
                image: num_image_tokens,
                keys: num_keys,
            });
        }
        let expected = num_heads * num_queries * num_keys;
        if values.len() != expected {
            return Err(TensorError::ValueCount {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            layer_index,
            num_heads,
            num_queries,
            num_keys,
            num_image_tokens,
            values,
        })
    }

    pub fn layer_index(&self) -> u32 {
        self.layer_index
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    pub fn num_image_tokens(&self) -> usize {
        self.num_image_tokens
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, head: usize, query: usize, key: usize) -> usize {
        (head * self.num_queries + query) * self.num_keys + key
    }

    #[inline]
    pub fn get(&self, head: usize, query: usize, key: usize) -> f32 {
        self.values[self.index(head, query, key)]
    }

    /// All keys of one `(head, query)` row.
    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let start = self.index(head, query, 0);
        &self.values[start..start + self.num_keys]
    }

    /// Checks that `meta` describes exactly this tensor's queries.
    pub fn check_meta(&self, meta: &TokenMeta) -> Result<(), TensorError> {
        if meta.len() != self.num_queries {
            return Err(TensorError::RoleCount {
                roles: meta.len(),
                queries: self.num_queries,
            });
        }
        Ok(())
    }
}

/// One broken invariant found by [`validate_tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotANumber {
        head: usize,
        query: usize,
        key: usize,
    },
    Infinite {
        head: usize,
        query: usize,
        key: usize,
    },
    Negative {
        head: usize,
        query: usize,
        key: usize,
        value: f32,
    },
    RowSum {
        head: usize,
        query: usize,
        sum: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotANumber { head, query, key } => {
                write!(f, "NaN at [{head},{query},{key}]")
            }
            Self::Infinite { head, query, key } => {
                write!(f, "infinite value at [{head},{query},{key}]")
            }
            Self::Negative {
                head,
                query,
                key,
                value,
            } => write!(f, "negative value {value} at [{head},{query},{key}]"),
            Self::RowSum { head, query, sum } => write!(
                f,
                "row [{head},{query}] sums to {sum}, expected 1 ± {ROW_SUM_TOLERANCE}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every value-level invariant `t` breaks.
///
/// With `softmax_rows` set, each `(head, query)` row must also sum to
/// `1 ± 1e-5`. Masked keys carry exact zeros, so summing over all keys is the
/// same as summing over the unmasked ones.
pub fn validate_tensor(t: &AttentionTensor, softmax_rows: bool) -> ValidationReport {
    let mut violations = Vec::new();
    for head in 0..t.num_heads {
        for query in 0..t.num_queries {
            let mut sum = 0.0f64;
            let mut row_finite = true;
            for (key, &value) in t.row(head, query).iter().enumerate() {
                if value.is_nan() {
                    violations.push(Violation::NotANumber { head, query, key });
                    row_finite = false;
                } else if value.is_infinite() {
                    violations.push(Violation::Infinite { head, query, key });
                    row_finite = false;
                } else if value < 0.0 {
                    violations.push(Violation::Negative {
                        head,
                        query,
                        key,
                        value,
                    });
                }
                sum += value as f64;
            }
            if softmax_rows && row_finite && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                violations.push(Violation::RowSum { head, query, sum });
            }
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(h: usize, q: usize, k: usize) -> AttentionTensor {
        let v = vec![1.0 / k as f32; h * q * k];
        AttentionTensor::new(0, h, q, k, k, v).unwrap()
    }

    #[test]
    fn valid_softmax_tensor_has_empty_report() {
        assert!(validate_tensor(&uniform(2, 3, 4), true).is_valid());
    }

    #[test]
    fn short_row_is_reported_with_indices() {
        let mut v = vec![0.25f32; 2 * 3 * 4];
        // head 1, query 2 sums to 0.8
        let t0 = uniform(2, 3, 4);
        let i = t0.index(1, 2, 0);
        v[i..i + 4].copy_from_slice(&[0.2, 0.2, 0.2, 0.2]);
        let t = AttentionTensor::new(0, 2, 3, 4, 4, v).unwrap();
        let report = validate_tensor(&t, true);
        assert_eq!(report.violations.len(), 1);
        match report.violations[0] {
            Violation::RowSum { head, query, sum } => {
                assert_eq!((head, query), (1, 2));
                assert!((sum - 0.8).abs() < 1e-6);
            }
            ref other => panic!("unexpected {other:?}"),
        }
        // row sums are only checked on request
        assert!(validate_tensor(&t, false).is_valid());
    }

    #[test]
    fn negative_value_is_located() {
        let mut v = vec![0.5f32; 4];
        v[0] = -0.1;
        let t = AttentionTensor::new(0, 1, 2, 2, 2, v).unwrap();
        let report = validate_tensor(&t, false);
        assert_eq!(
            report.violations,
            vec![Violation::Negative {
                head: 0,
                query: 0,
                key: 0,
                value: -0.1
            }]
        );
    }

    #[test]
    fn nan_is_a_violation() {
        let t = AttentionTensor::new(0, 1, 1, 2, 2, vec![f32::NAN, 0.5]).unwrap();
        let report = validate_tensor(&t, true);
        assert_eq!(
            report.violations,
            vec![Violation::NotANumber {
                head: 0,
                query: 0,
                key: 0
            }]
        );
    }

    #[test]
    fn validation_is_pure() {
        let t = AttentionTensor::new(0, 1, 1, 3, 3, vec![0.1, -0.2, 0.3]).unwrap();
        assert_eq!(validate_tensor(&t, true), validate_tensor(&t, true));
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            AttentionTensor::new(0, 0, 1, 1, 1, vec![]),
            Err(TensorError::EmptyDimension { .. })
        ));
        assert!(matches!(
            AttentionTensor::new(0, 1, 1, 2, 3, vec![0.0; 2]),
            Err(TensorError::ImageTokensExceedKeys { image: 3, keys: 2 })
        ));
        assert!(matches!(
            AttentionTensor::new(0, 1, 1, 2, 2, vec![0.0; 3]),
            Err(TensorError::ValueCount { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn role_codes_round_trip() {
        for code in 0..5u8 {
            assert_eq!(QueryRole::from_code(code).unwrap().code(), code);
        }
        assert_eq!(QueryRole::from_code(5), None);
    }
}
