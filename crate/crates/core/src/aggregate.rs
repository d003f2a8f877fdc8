//! From raw attention to a normalised spatial map.
//!
//! 1. keep only `content` queries,
//! 2. L1-renormalise each `(head, query)` row over the image keys,
//!    `Ā[h,q,k] = A[h,q,k] / (Σ_{j<L_img} A[h,q,j] + ε)`,
//! 3. average over heads and kept queries into `v ∈ R^{L_img}`,
//! 4. reshape row-major to `G×G` and min-max normalise.
//!
//! Arithmetic is f64 whatever the storage precision, with a fixed summation
//! order (keys innermost, then queries, then heads), so results are
//! bitwise reproducible.

use thiserror::Error;

use crate::tensor::{AttentionTensor, QueryRole, TensorError, TokenMeta};

/// Default ε of the per-head renormalisation.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("no content queries to aggregate")]
    NoContentQueries,
    #[error("query index {index} out of range for {queries} queries")]
    QueryOutOfRange { index: usize, queries: usize },
    #[error("map of {len} values cannot form a {grid_side}×{grid_side} grid")]
    GridMismatch { len: usize, grid_side: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error(transparent)]
    Shape(#[from] TensorError),
}

/// Min-max normalised `G×G` map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityMap {
    pub grid_side: usize,
    pub values: Vec<f64>,
    /// Decoder block the attention came from, when known.
    pub source_layer: Option<u32>,
    /// `Σ_k v[k]` before min-max normalisation, when known.
    pub pre_normalization_sum: Option<f64>,
}

impl AmbiguityMap {
    /// Wraps already-normalised values, e.g. synthetic or loaded maps.
    pub fn from_values(grid_side: usize, values: Vec<f64>) -> Result<Self, AggregateError> {
        if values.len() != grid_side * grid_side {
            return Err(AggregateError::GridMismatch {
                len: values.len(),
                grid_side,
            });
        }
        Ok(Self {
            grid_side,
            values,
            source_layer: None,
            pre_normalization_sum: None,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_side + col]
    }

    /// `(row, col)` of the largest value, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let (idx, _) =
            self.values.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            );
        (idx / self.grid_side, idx % self.grid_side)
    }

    /// Text-art rendering, one character per cell.
    pub fn render_ascii(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*#%@";
        let mut out = String::with_capacity(self.grid_side * (self.grid_side + 1));
        for row in self.values.chunks(self.grid_side) {
            for &v in row {
                let level = ((v.clamp(0.0, 1.0)) * (RAMP.len() - 1) as f64).round() as usize;
                out.push(RAMP[level] as char);
            }
            out.push('\n');
        }
        out
    }
}

/// Per-head renormalised attention, `H×|queries|×L_img`.
#[derive(Debug, Clone, PartialEq)]
pub struct Renormalized {
    pub num_heads: usize,
    pub num_queries: usize,
    pub num_image_tokens: usize,
    pub values: Vec<f64>,
    /// Raw image mass `Σ_{j<L_img} A[h,q,j]` of each row, `H×|queries|`.
    pub row_mass: Vec<f64>,
}

impl Renormalized {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.num_queries + query) * self.num_image_tokens;
        &self.values[start..start + self.num_image_tokens]
    }
}

/// Intermediates of [`extract_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTrace {
    pub content_query_indices: Vec<usize>,
    pub renormalized: Renormalized,
    pub pooled: Vec<f64>,
    pub epsilon: f64,
}

/// Indices of `content` queries in ascending order.
pub fn select_queries(meta: &TokenMeta) -> Result<Vec<usize>, AggregateError> {
    let picked: Vec<usize> = meta
        .query_roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == QueryRole::Content)
        .map(|(i, _)| i)
        .collect();
    if picked.is_empty() {
        return Err(AggregateError::NoContentQueries);
    }
    Ok(picked)
}

pub fn renormalize_per_head(
    t: &AttentionTensor,
    queries: &[usize],
    epsilon: f64,
) -> Result<Renormalized, AggregateError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(AggregateError::BadEpsilon(epsilon));
    }
    if let Some(&index) = queries.iter().find(|&&q| q >= t.num_queries()) {
        return Err(AggregateError::QueryOutOfRange {
            index,
            queries: t.num_queries(),
        });
    }
    let l_img = t.num_image_tokens();
    let mut values = Vec::with_capacity(t.num_heads() * queries.len() * l_img);
    let mut row_mass = Vec::with_capacity(t.num_heads() * queries.len());
    for h in 0..t.num_heads() {
        for &q in queries {
            let image = &t.row(h, q)[..l_img];
            let mass: f64 = image.iter().map(|&a| a as f64).sum();
            let denom = mass + epsilon;
            values.extend(image.iter().map(|&a| a as f64 / denom));
            row_mass.push(mass);
        }
    }
    Ok(Renormalized {
        num_heads: t.num_heads(),
        num_queries: queries.len(),
        num_image_tokens: l_img,
        values,
        row_mass,
    })
}

/// `v[k] = (1 / (|queries|·H)) Σ_h Σ_q Ā[h,q,k]`.
pub fn aggregate_mean(renorm: &Renormalized) -> Result<Vec<f64>, AggregateError> {
    if renorm.num_queries == 0 {
        return Err(AggregateError::NoContentQueries);
    }
    let mut v = vec![0.0; renorm.num_image_tokens];
    for h in 0..renorm.num_heads {
        for q in 0..renorm.num_queries {
            for (acc, &a) in v.iter_mut().zip(renorm.row(h, q)) {
                *acc += a;
            }
        }
    }
    let count = (renorm.num_queries * renorm.num_heads) as f64;
    v.iter_mut().for_each(|x| *x /= count);
    Ok(v)
}

/// Reshapes `v` to `G×G` (patch `p` to row `p / G`, column `p % G`) and
/// min-max normalises. A constant `v` gives the all-zero map.
pub fn finalize_map(v: &[f64], grid_side: usize) -> Result<AmbiguityMap, AggregateError> {
    if grid_side == 0 || v.len() != grid_side * grid_side {
        return Err(AggregateError::GridMismatch {
            len: v.len(),
            grid_side,
        });
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range > 0.0 {
        v.iter().map(|&x| ((x - min) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.len()]
    };
    Ok(AmbiguityMap {
        grid_side,
        values,
        source_layer: None,
        pre_normalization_sum: Some(v.iter().sum()),
    })
}

/// The whole pipeline; the trace keeps every intermediate.
pub fn extract_map(
    t: &AttentionTensor,
    meta: &TokenMeta,
    grid_side: usize,
    epsilon: f64,
) -> Result<(AmbiguityMap, AggregationTrace), AggregateError> {
    t.check_meta(meta)?;
    if t.num_image_tokens() != grid_side * grid_side {
        return Err(AggregateError::GridMismatch {
            len: t.num_image_tokens(),
            grid_side,
        });
    }
    let queries = select_queries(meta)?;
    let renormalized = renormalize_per_head(t, &queries, epsilon)?;
    let pooled = aggregate_mean(&renormalized)?;
    let mut map = finalize_map(&pooled, grid_side)?;
    map.source_layer = Some(t.layer_index());
    Ok((
        map,
        AggregationTrace {
            content_query_indices: queries,
            renormalized,
            pooled,
            epsilon,
        },
    ))
}

/// Side length of a square image grid with `num_image_tokens` patches.
pub fn infer_grid_side(num_image_tokens: usize) -> Option<usize> {
    let g = (num_image_tokens as f64).sqrt().round() as usize;
    (g * g == num_image_tokens && g > 0).then_some(g)
}
