//! Minimal multimodal decoder used to produce genuine attention tensors.
//!
//! Image tokens (learned embeddings `0..L_img`) come first, followed by the
//! text prefix and an optional generated suffix. Blocks are pre-norm
//! transformer layers with grouped-query attention under a prefix-LM mask.
//! Weights are fixed random draws from the config seed; nothing is trained.

mod mask;
pub mod tokenizer;

use rayon::prelude::*;
use thiserror::Error;

pub use mask::{build_mask, AttentionMask};
pub use tokenizer::ToyTokenizer;

use crate::rng::{derive_seed, he_uniform, seeded, uniform};
use crate::tensor::{AttentionTensor, QueryRole, TokenMeta};

const NORM_EPS: f64 = 1e-6;
const EMBED_BOUND: f64 = 1.732_050_807_568_877_2; // sqrt(3): unit variance
const MLP_RATIO: usize = 4;

// Weight streams; each tensor draws from its own seeded generator.
const STREAM_TOKEN: u64 = 1;
const STREAM_IMAGE: u64 = 2;
const STREAM_POSITION: u64 = 3;
const STREAM_HEAD: u64 = 4;
const STREAM_BLOCK: u64 = 100;

#[derive(Debug, Error, PartialEq)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("read layer {layer} out of range for a {num_layers}-layer decoder")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence has {got} image tokens, decoder expects {expected}")]
    ImageTokenCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub num_image_tokens: usize,
    pub grid_side: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            num_kv_heads: 2,
            model_dim: 64,
            vocab_size: 256,
            num_image_tokens: 64,
            grid_side: 8,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    /// Sets the image grid and the matching image token count.
    pub fn with_grid(mut self, grid_side: usize) -> Self {
        self.grid_side = grid_side;
        self.num_image_tokens = grid_side * grid_side;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    /// Read index of the half-depth variant: `floor(num_layers / 2)`.
    pub fn half_depth_layer(&self) -> usize {
        self.num_layers / 2
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let fail = |msg: String| Err(DecoderError::Config(msg));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.num_kv_heads == 0 {
            return fail("head counts must be at least 1".into());
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return fail(format!(
                "num_kv_heads {} does not divide num_heads {}",
                self.num_kv_heads, self.num_heads
            ));
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size < tokenizer::MIN_VOCAB {
            return fail(format!("vocab_size must be at least {}", tokenizer::MIN_VOCAB));
        }
        if self.num_image_tokens != self.grid_side * self.grid_side {
            return fail(format!(
                "num_image_tokens {} != grid_side² ({}²)",
                self.num_image_tokens, self.grid_side
            ));
        }
        Ok(())
    }
}

/// Image block, then prefix, then suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub image_token_count: usize,
    pub prefix_token_ids: Vec<u32>,
    pub suffix_token_ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(image_token_count: usize, prefix_token_ids: Vec<u32>, suffix_token_ids: Vec<u32>) -> Self {
        Self {
            image_token_count,
            prefix_token_ids,
            suffix_token_ids,
        }
    }

    /// Tokenizes prefix and suffix text. `<image>` placeholders in the prefix
    /// are dropped: the image block already stands for them.
    pub fn from_text(tok: &ToyTokenizer, image_token_count: usize, prefix: &str, suffix: &str) -> Self {
        let prefix_ids = tok
            .tokenize(prefix)
            .into_iter()
            .filter(|&id| id != tokenizer::IMAGE)
            .collect();
        Self::new(image_token_count, prefix_ids, tok.tokenize(suffix))
    }

    pub fn len(&self) -> usize {
        self.image_token_count + self.prefix_token_ids.len() + self.suffix_token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First suffix position.
    pub fn prefix_end(&self) -> usize {
        self.image_token_count + self.prefix_token_ids.len()
    }

    fn text_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.prefix_token_ids.iter().chain(&self.suffix_token_ids).copied()
    }

    /// Role of every position, for use as the query metadata of a full
    /// `T×T` attention tensor.
    pub fn token_meta(&self, tok: &ToyTokenizer) -> TokenMeta {
        let mut roles = vec![QueryRole::Image; self.image_token_count];
        let mut strings = vec![String::new(); self.image_token_count];
        for id in self.text_ids() {
            roles.push(match id {
                tokenizer::CLARIFY => QueryRole::Conditioning,
                tokenizer::EOS => QueryRole::Eos,
                tokenizer::PAD => QueryRole::Pad,
                tokenizer::IMAGE => QueryRole::Image,
                _ => QueryRole::Content,
            });
            strings.push(tok.decode(&[id]));
        }
        TokenMeta::new(roles).with_strings(strings)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    fn he(seed: u64, rows: usize, cols: usize) -> Self {
        let data = he_uniform(&mut seeded(seed), rows * cols, rows);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `x (n×rows) · self`, returning `n×cols`.
    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.rows);
        let mut out = vec![0.0; n * self.cols];
        for (xi, oi) in x.chunks_exact(self.rows).zip(out.chunks_exact_mut(self.cols)) {
            for (r, &xv) in xi.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w = &self.data[r * self.cols..(r + 1) * self.cols];
                for (o, &wv) in oi.iter_mut().zip(w) {
                    *o += xv * wv;
                }
            }
        }
        out
    }
}

/// Weights of one decoder block.
///
/// `wk` and `wv` hold `num_kv_heads · head_dim` columns only: query heads
/// `g·group .. (g+1)·group` all read kv head `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyDecoder {
    cfg: DecoderConfig,
    tokenizer: ToyTokenizer,
    token_embed: Vec<f64>,
    image_embed: Vec<f64>,
    blocks: Vec<BlockWeights>,
    lm_head: Matrix,
}

impl ToyDecoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let kv_width = cfg.num_kv_heads * cfg.head_dim();
        let s = |stream: u64| derive_seed(cfg.seed, stream);
        let blocks = (0..cfg.num_layers as u64)
            .map(|l| {
                let base = STREAM_BLOCK + 10 * l;
                BlockWeights {
                    wq: Matrix::he(s(base), d, d),
                    wk: Matrix::he(s(base + 1), d, kv_width),
                    wv: Matrix::he(s(base + 2), d, kv_width),
                    wo: Matrix::he(s(base + 3), d, d),
                    w_up: Matrix::he(s(base + 4), d, MLP_RATIO * d),
                    w_down: Matrix::he(s(base + 5), MLP_RATIO * d, d),
                }
            })
            .collect();
        Ok(Self {
            tokenizer: ToyTokenizer::new(cfg.vocab_size),
            token_embed: uniform(&mut seeded(s(STREAM_TOKEN)), cfg.vocab_size * d, EMBED_BOUND),
            image_embed: uniform(&mut seeded(s(STREAM_IMAGE)), cfg.num_image_tokens * d, EMBED_BOUND),
            lm_head: Matrix::he(s(STREAM_HEAD), d, cfg.vocab_size),
            blocks,
            cfg,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    /// Key/value head read by `query_head`.
    pub fn kv_head_for(&self, query_head: usize) -> usize {
        query_head / self.cfg.group_size()
    }

    fn position_embedding(&self, position: usize) -> Vec<f64> {
        let seed = derive_seed(derive_seed(self.cfg.seed, STREAM_POSITION), position as u64);
        uniform(&mut seeded(seed), self.cfg.model_dim, EMBED_BOUND)
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<(), DecoderError> {
        if seq.is_empty() {
            return Err(DecoderError::EmptySequence);
        }
        if seq.image_token_count != self.cfg.num_image_tokens {
            return Err(DecoderError::ImageTokenCount {
                expected: self.cfg.num_image_tokens,
                got: seq.image_token_count,
            });
        }
        if let Some(id) = seq.text_ids().find(|&id| id as usize >= self.cfg.vocab_size) {
            return Err(DecoderError::TokenOutOfRange {
                id,
                vocab_size: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, seq: &TokenSequence) -> Vec<f64> {
        let d = self.cfg.model_dim;
        let mut x = Vec::with_capacity(seq.len() * d);
        for p in 0..seq.image_token_count {
            x.extend_from_slice(&self.image_embed[p * d..(p + 1) * d]);
        }
        for id in seq.text_ids() {
            let id = id as usize;
            x.extend_from_slice(&self.token_embed[id * d..(id + 1) * d]);
        }
        for (p, row) in x.chunks_exact_mut(d).enumerate() {
            for (v, e) in row.iter_mut().zip(self.position_embedding(p)) {
                *v += e;
            }
        }
        x
    }

    fn rms_norm(&self, x: &[f64]) -> Vec<f64> {
        let d = self.cfg.model_dim;
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }

    /// Post-softmax attention of one block, `H×T×T` row-major; masked
    /// entries are exactly zero.
    fn attention_probs(&self, block: &BlockWeights, normed: &[f64], mask: &AttentionMask) -> Vec<f64> {
        let t = mask.size();
        let hd = self.cfg.head_dim();
        let q = block.wq.apply(normed, t);
        let k = block.wk.apply(normed, t);
        let q_width = block.wq.cols;
        let k_width = block.wk.cols;
        let scale = 1.0 / (hd as f64).sqrt();

        let per_head: Vec<Vec<f64>> = (0..self.cfg.num_heads)
            .into_par_iter()
            .map(|h| {
                let g = self.kv_head_for(h);
                let mut probs = vec![0.0; t * t];
                let mut scores = vec![0.0; t];
                for i in 0..t {
                    let qi = &q[i * q_width + h * hd..i * q_width + (h + 1) * hd];
                    let allowed = mask.row(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if allowed[j] {
                            let kj = &k[j * k_width + g * hd..j * k_width + (g + 1) * hd];
                            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let row = &mut probs[i * t..(i + 1) * t];
                    let mut total = 0.0;
                    for j in 0..t {
                        if allowed[j] {
                            let e = (scores[j] - max).exp();
                            row[j] = e;
                            total += e;
                        }
                    }
                    row.iter_mut().for_each(|p| *p /= total);
                }
                probs
            })
            .collect();
        per_head.concat()
    }

    fn block_forward(&self, block: &BlockWeights, x: &mut [f64], mask: &AttentionMask) -> Vec<f64> {
        let t = mask.size();
        let d = self.cfg.model_dim;
        let hd = self.cfg.head_dim();
        let normed = self.rms_norm(x);
        let probs = self.attention_probs(block, &normed, mask);
        let v = block.wv.apply(&normed, t);
        let v_width = block.wv.cols;

        let mut heads_out = vec![0.0; t * d];
        for h in 0..self.cfg.num_heads {
            let g = self.kv_head_for(h);
            for i in 0..t {
                let row = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let out = &mut heads_out[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, &p) in row.iter().enumerate() {
                    if p != 0.0 {
                        let vj = &v[j * v_width + g * hd..j * v_width + (g + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let attn_out = block.wo.apply(&heads_out, t);
        x.iter_mut().zip(&attn_out).for_each(|(a, b)| *a += b);

        let normed = self.rms_norm(x);
        let mut hidden = block.w_up.apply(&normed, t);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mlp_out = block.w_down.apply(&hidden, t);
        x.iter_mut().zip(&mlp_out).for_each(|(a, b)| *a += b);
        probs
    }

    fn check_layer(&self, layer: usize) -> Result<(), DecoderError> {
        if layer >= self.cfg.num_layers {
            return Err(DecoderError::LayerOutOfRange {
                layer,
                num_layers: self.cfg.num_layers,
            });
        }
        Ok(())
    }

    /// Runs blocks `0..=read_layer` and returns the raw per-head attention of
    /// block `read_layer` as an `H×T×T` tensor with `L_img` image keys.
    pub fn forward_attention(&self, seq: &TokenSequence, read_layer: usize) -> Result<AttentionTensor, DecoderError> {
        self.check_layer(read_layer)?;
        self.check_sequence(seq)?;
        let mask = build_mask(seq)?;
        let mut x = self.embed(seq);
        let mut probs = Vec::new();
        for block in &self.blocks[..=read_layer] {
            probs = self.block_forward(block, &mut x, &mask);
        }
        let t = seq.len();
        let values = probs.into_iter().map(|p| p as f32).collect();
        let tensor = AttentionTensor::new(
            read_layer as u32,
            self.cfg.num_heads,
            t,
            t,
            seq.image_token_count,
            values,
        )
        .expect("decoder attention has a consistent shape");
        Ok(tensor)
    }

    /// Normalised hidden states entering block `layer`'s attention, `T×d`.
    /// Exposed so tests can recompute attention independently.
    pub fn attention_input(&self, seq: &TokenSequence, layer: usize) -> Result<Vec<f64>, DecoderError> {
        self.check_layer(layer)?;
        self.check_sequence(seq)?;
        let mask = build_mask(seq)?;
        let mut x = self.embed(seq);
        for block in &self.blocks[..layer] {
            self.block_forward(block, &mut x, &mask);
        }
        Ok(self.rms_norm(&x))
    }

    /// Next-token logits after the full stack, `T×V` row-major.
    pub fn logits(&self, seq: &TokenSequence) -> Result<Vec<f64>, DecoderError> {
        self.check_sequence(seq)?;
        let mask = build_mask(seq)?;
        let mut x = self.embed(seq);
        for block in &self.blocks {
            self.block_forward(block, &mut x, &mask);
        }
        Ok(self.lm_head.apply(&self.rms_norm(&x), seq.len()))
    }

    /// Greedy decoding of up to `max_new_tokens` after `seq`, stopping at eos.
    pub fn greedy_generate(&self, seq: &TokenSequence, max_new_tokens: usize) -> Result<Vec<u32>, DecoderError> {
        let mut seq = seq.clone();
        let mut generated = Vec::new();
        let v = self.cfg.vocab_size;
        for _ in 0..max_new_tokens {
            let logits = self.logits(&seq)?;
            let last = &logits[(seq.len() - 1) * v..];
            let next = last
                .iter()
                .enumerate()
                .fold(
                    (0usize, f64::NEG_INFINITY),
                    |best, (i, &l)| if l > best.1 { (i, l) } else { best },
                )
                .0 as u32;
            if next == tokenizer::EOS {
                break;
            }
            generated.push(next);
            seq.suffix_token_ids.push(next);
        }
        Ok(generated)
    }
}

/// One-shot helper: builds the decoder for `cfg` and reads `read_layer`.
pub fn forward_attention(
    cfg: &DecoderConfig,
    seq: &TokenSequence,
    read_layer: usize,
) -> Result<AttentionTensor, DecoderError> {
    ToyDecoder::new(cfg.clone())?.forward_attention(seq, read_layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyDecoder {
        ToyDecoder::new(DecoderConfig::default().with_grid(2).with_seed(3)).unwrap()
    }

    fn sample_seq(dec: &ToyDecoder) -> TokenSequence {
        TokenSequence::from_text(dec.tokenizer(), 4, "<image>clarify get the cup", "ok")
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        let bad = DecoderConfig {
            num_kv_heads: 3,
            ..DecoderConfig::default()
        };
        assert!(matches!(bad.validate(), Err(DecoderError::Config(_))));
        let bad = DecoderConfig {
            num_image_tokens: 10,
            ..DecoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(DecoderConfig::default().half_depth_layer(), 2);
    }

    #[test]
    fn rows_are_stochastic_and_masked_entries_zero() {
        let dec = small();
        let seq = sample_seq(&dec);
        let mask = build_mask(&seq).unwrap();
        let t = dec.forward_attention(&seq, 1).unwrap();
        for h in 0..t.num_heads() {
            for q in 0..t.num_queries() {
                let row = t.row(h, q);
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((sum - 1.0).abs() < 1e-5);
                for (k, &v) in row.iter().enumerate() {
                    if !mask.allowed(q, k) {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let dec = small();
        let seq = sample_seq(&dec);
        let a = dec.forward_attention(&seq, 2).unwrap();
        let b = forward_attention(dec.config(), &seq, 2).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn read_layer_out_of_range() {
        let dec = small();
        let seq = sample_seq(&dec);
        assert_eq!(
            dec.forward_attention(&seq, 4).unwrap_err(),
            DecoderError::LayerOutOfRange {
                layer: 4,
                num_layers: 4
            }
        );
    }

    #[test]
    fn kv_projections_are_shared_within_groups() {
        let dec = small();
        let cfg = dec.config();
        for block in dec.blocks() {
            assert_eq!(block.wk.cols, cfg.num_kv_heads * cfg.head_dim());
            assert_eq!(block.wv.cols, cfg.num_kv_heads * cfg.head_dim());
            assert_eq!(block.wq.cols, cfg.num_heads * cfg.head_dim());
        }
        let groups: Vec<usize> = (0..cfg.num_heads).map(|h| dec.kv_head_for(h)).collect();
        assert_eq!(groups, vec![0, 0, 1, 1]);
    }

    #[test]
    fn token_meta_roles() {
        let dec = small();
        let seq = sample_seq(&dec);
        let meta = seq.token_meta(dec.tokenizer());
        assert_eq!(meta.len(), seq.len());
        assert!(meta.query_roles[..4].iter().all(|r| *r == QueryRole::Image));
        assert_eq!(meta.query_roles[4], QueryRole::Conditioning);
        assert_eq!(meta.query_roles[5], QueryRole::Content);
    }

    #[test]
    fn wrong_image_count_is_rejected() {
        let dec = small();
        let seq = TokenSequence::new(3, vec![10], vec![]);
        assert!(matches!(
            dec.forward_attention(&seq, 0),
            Err(DecoderError::ImageTokenCount { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn greedy_generation_is_bounded_and_deterministic() {
        let dec = small();
        let seq = sample_seq(&dec);
        let a = dec.greedy_generate(&seq, 5).unwrap();
        assert!(a.len() <= 5);
        assert_eq!(a, dec.greedy_generate(&seq, 5).unwrap());
    }
}
