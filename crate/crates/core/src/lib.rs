//! Turning a multimodal decoder's text-to-image attention into an explicit
//! referential-ambiguity signal.
//!
//! The crate is organised along the data flow:
//!
//! * [`tensor`] and [`cat1`]: attention tensors, token metadata and the CAT1
//!   on-disk format.
//! * [`decoder`]: a small grouped-query, prefix-LM decoder that produces real
//!   attention tensors without an external model.
//! * [`aggregate`]: per-head renormalisation, mean pooling and grid reshaping
//!   into an [`aggregate::AmbiguityMap`].
//! * [`probe`]: the CNN classifier over maps, its training loop and peak
//!   localisation.
//! * [`loc`]: `<locDDDD>` bounding-box tokens.
//! * [`dialog`]: the ask-or-ground loop, supervision pairs and suffix-masked
//!   cross-entropy.
//! * [`metrics`]: IoU, classification scores and the decoder-layer sweep.
//! * [`synth`]: synthetic maps and scenes.

pub mod aggregate;
pub mod cat1;
pub mod decoder;
pub mod dialog;
pub mod loc;
pub mod mapfile;
pub mod metrics;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use aggregate::{extract_map, AggregationTrace, AmbiguityMap};
pub use loc::{BoxNorm, LocQuad};
pub use tensor::{AttentionTensor, QueryRole, TokenMeta};
