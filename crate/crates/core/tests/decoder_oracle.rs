//! The toy decoder's attention recomputed from its own weights by a
//! straightforward reference, plus a frozen regression sample.

use clue_core::decoder::{build_mask, DecoderConfig, TokenSequence, ToyDecoder};

/// Softmax attention of every query head from normed block input `x`
/// (`T×d`), written without any of the decoder's helpers.
fn reference_attention(dec: &ToyDecoder, layer: usize, x: &[f64], seq: &TokenSequence) -> Vec<f64> {
    let cfg = dec.config();
    let (t, d, h_count, kv_count) = (seq.len(), cfg.model_dim, cfg.num_heads, cfg.num_kv_heads);
    let hd = d / h_count;
    let w = &dec.blocks()[layer];
    let matmul = |m: &clue_core::decoder::Matrix, row: usize, col: usize| -> f64 {
        (0..d).map(|r| x[row * d + r] * m.get(r, col)).sum()
    };
    let prefix_end = seq.prefix_end();
    let mut out = vec![0.0; h_count * t * t];
    for h in 0..h_count {
        let kv = h * kv_count / h_count;
        for i in 0..t {
            let visible: Vec<usize> = (0..t)
                .filter(|&j| if i < prefix_end { j < prefix_end } else { j <= i })
                .collect();
            let scores: Vec<f64> = visible
                .iter()
                .map(|&j| {
                    (0..hd)
                        .map(|c| matmul(&w.wq, i, h * hd + c) * matmul(&w.wk, j, kv * hd + c))
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (&j, s) in visible.iter().zip(&scores) {
                out[(h * t + i) * t + j] = (s - max).exp() / z;
            }
        }
    }
    out
}

fn assert_matches_reference(dec: &ToyDecoder, seq: &TokenSequence, layer: usize) {
    let t = dec.forward_attention(seq, layer).unwrap();
    let x = dec.attention_input(seq, layer).unwrap();
    let expected = reference_attention(dec, layer, &x, seq);
    for (i, (&got, want)) in t.values().iter().zip(&expected).enumerate() {
        assert!((got as f64 - want).abs() < 1e-6, "entry {i}: {got} vs {want}");
        if *want == 0.0 {
            assert_eq!(got, 0.0);
        }
    }
}

#[test]
fn two_token_grouped_query_case() {
    let cfg = DecoderConfig {
        num_layers: 1,
        num_heads: 2,
        num_kv_heads: 1,
        model_dim: 4,
        vocab_size: 16,
        ..DecoderConfig::default().with_grid(1)
    }
    .with_seed(17);
    let dec = ToyDecoder::new(cfg).unwrap();
    // image token + one prefix token: fully bidirectional
    assert_matches_reference(&dec, &TokenSequence::new(1, vec![9], vec![]), 0);
    // image token + one suffix token: the image row cannot see the suffix
    let causal = TokenSequence::new(1, vec![], vec![9]);
    assert_matches_reference(&dec, &causal, 0);
    let t = dec.forward_attention(&causal, 0).unwrap();
    for h in 0..2 {
        assert_eq!(t.get(h, 0, 1), 0.0);
        assert_eq!(t.get(h, 0, 0), 1.0);
    }
}

#[test]
fn grouped_heads_share_keys_in_a_deeper_stack() {
    let cfg = DecoderConfig::default().with_grid(2).with_seed(5);
    let dec = ToyDecoder::new(cfg).unwrap();
    let seq = TokenSequence::from_text(dec.tokenizer(), 4, "<image>clarify get the cup", "ok<eos>");
    for layer in 0..4 {
        assert_matches_reference(&dec, &seq, layer);
    }
    assert_eq!(dec.kv_head_for(0), dec.kv_head_for(1));
    assert_ne!(dec.kv_head_for(1), dec.kv_head_for(2));
}

#[test]
fn mask_and_attention_agree_on_zeros() {
    let dec = ToyDecoder::new(DecoderConfig::default().with_grid(2).with_seed(8)).unwrap();
    let seq = TokenSequence::from_text(dec.tokenizer(), 4, "<image>clarify a", "bc");
    let mask = build_mask(&seq).unwrap();
    let t = dec.forward_attention(&seq, 1).unwrap();
    for h in 0..t.num_heads() {
        for i in 0..seq.len() {
            for j in 0..seq.len() {
                assert_eq!(mask.allowed(i, j), t.get(h, i, j) > 0.0, "h{h} ({i},{j})");
            }
        }
    }
}

/// Frozen sample of one forward pass. A change here means the decoder's
/// numerics or its seeding changed.
#[test]
fn golden_forward_sample() {
    let dec = ToyDecoder::new(DecoderConfig::default().with_grid(2).with_seed(2024)).unwrap();
    let seq = TokenSequence::from_text(dec.tokenizer(), 4, "<image>clarify Get the apple", "");
    let t = dec.forward_attention(&seq, 2).unwrap();
    let checksum: f64 = t
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 * ((i % 97) as f64 + 1.0))
        .sum();
    let sample = [t.get(0, 5, 0), t.get(1, 7, 3), t.get(3, 10, 10)];
    println!("checksum {checksum:.9} sample {sample:?}");
    assert!((checksum - GOLDEN_CHECKSUM).abs() < 1e-6, "{checksum}");
    for (got, want) in sample.iter().zip(GOLDEN_SAMPLE) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

const GOLDEN_CHECKSUM: f64 = 3689.159618203;
const GOLDEN_SAMPLE: [f32; 3] = [0.021292804, 0.0010282623, 0.010454088];
