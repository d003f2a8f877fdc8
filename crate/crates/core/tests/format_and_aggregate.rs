use clue_core::aggregate::{extract_map, renormalize_per_head, select_queries, DEFAULT_EPSILON};
use clue_core::cat1::{read_header, read_tensor, write_tensor, HEADER_LEN};
use clue_core::decoder::{DecoderConfig, TokenSequence, ToyDecoder};
use clue_core::{AttentionTensor, QueryRole, TokenMeta};
use proptest::prelude::*;

const ROLES: [QueryRole; 5] = [
    QueryRole::Content,
    QueryRole::Conditioning,
    QueryRole::Eos,
    QueryRole::Pad,
    QueryRole::Image,
];

/// A tensor with positive rows that sum to one, at least one content query
/// and a square image block.
fn softmax_tensor() -> impl Strategy<Value = (AttentionTensor, TokenMeta, usize)> {
    (1usize..5, 1usize..7, 1usize..6, 0usize..5).prop_flat_map(|(h, q, g, extra)| {
        let k = g * g + extra;
        (
            prop::collection::vec(0.01f32..1.0, h * q * k),
            prop::collection::vec(0usize..5, q),
            0..q,
        )
            .prop_map(move |(mut raw, role_idx, forced)| {
                for row in raw.chunks_mut(k) {
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                }
                let mut roles: Vec<QueryRole> = role_idx.iter().map(|&i| ROLES[i]).collect();
                roles[forced] = QueryRole::Content;
                let t = AttentionTensor::new(3, h, q, k, g * g, raw).unwrap();
                (t, TokenMeta::new(roles), g)
            })
    })
}

fn scale_row(t: &AttentionTensor, head: usize, query: usize, c: f32) -> AttentionTensor {
    let mut values = t.values().to_vec();
    let start = t.index(head, query, 0);
    values[start..start + t.num_keys()].iter_mut().for_each(|x| *x *= c);
    AttentionTensor::new(
        t.layer_index(),
        t.num_heads(),
        t.num_queries(),
        t.num_keys(),
        t.num_image_tokens(),
        values,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn cat1_round_trip(
        (t, meta, _g) in softmax_tensor(),
        strings in prop::option::of(prop::collection::vec("[a-z<> ]{0,6}", 0..4)),
    ) {
        let meta = match strings {
            Some(s) if !s.is_empty() => meta.with_strings(s),
            _ => meta,
        };
        let mut buf = Vec::new();
        let written = write_tensor(&t, &meta, &mut buf).unwrap();
        prop_assert_eq!(written as usize, buf.len());
        let header = read_header(&buf[..]).unwrap();
        prop_assert_eq!(header.file_len(), Some(buf.len() as u64));
        prop_assert!(buf.len() >= HEADER_LEN + 4 * t.values().len() + t.num_queries());
        let (t2, meta2) = read_tensor(&buf[..]).unwrap();
        prop_assert_eq!(&t2, &t);
        prop_assert_eq!(&meta2, &meta);
    }

    #[test]
    fn truncated_files_are_rejected((t, meta, _g) in softmax_tensor(), cut in 1usize..64) {
        let mut buf = Vec::new();
        write_tensor(&t, &meta, &mut buf).unwrap();
        let keep = buf.len().saturating_sub(cut);
        prop_assert!(read_tensor(&buf[..keep]).is_err());
    }

    #[test]
    fn maps_are_normalised((t, meta, g) in softmax_tensor()) {
        let (map, trace) = extract_map(&t, &meta, g, DEFAULT_EPSILON).unwrap();
        prop_assert_eq!(map.values.len(), g * g);
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = map.values.iter().cloned().fold(0.0, f64::max);
        let constant = trace.pooled.iter().all(|&x| x == trace.pooled[0]);
        if constant {
            prop_assert!(map.values.iter().all(|&v| v == 0.0));
        } else {
            prop_assert_eq!(max, 1.0);
        }
        // every renormalised row carries (almost) unit image mass
        let pooled_sum: f64 = trace.pooled.iter().sum();
        prop_assert!((pooled_sum - 1.0).abs() < 1e-6, "{}", pooled_sum);
    }

    #[test]
    fn rescaled_row_moves_renormalised_values_within_bound(
        (t, meta, _g) in softmax_tensor(),
        c in prop::sample::select(vec![1e-3f32, 0.5, 1.0, 7.0, 1e3]),
        head_pick in any::<prop::sample::Index>(),
        query_pick in any::<prop::sample::Index>(),
    ) {
        let queries = select_queries(&meta).unwrap();
        let head = head_pick.index(t.num_heads());
        let qi = query_pick.index(queries.len());
        let scaled = scale_row(&t, head, queries[qi], c);
        let a = renormalize_per_head(&t, &queries, DEFAULT_EPSILON).unwrap();
        let b = renormalize_per_head(&scaled, &queries, DEFAULT_EPSILON).unwrap();
        let row = head * queries.len() + qi;
        let mass = a.row_mass[row];
        // float32 rounding of the scaled inputs adds a few ulps on top of the ε shift
        let bound = 2.0 * DEFAULT_EPSILON / (c as f64 * mass).min(mass) + 1e-6;
        for (x, y) in a.row(head, qi).iter().zip(b.row(head, qi)) {
            prop_assert!((x - y).abs() <= bound, "{} vs {} bound {}", x, y, bound);
        }
    }

    #[test]
    fn head_order_does_not_matter((t, meta, g) in softmax_tensor(), rot in 0usize..4) {
        let h = t.num_heads();
        let block = t.num_queries() * t.num_keys();
        let mut values = Vec::with_capacity(t.values().len());
        for i in 0..h {
            let src = (i + rot) % h;
            values.extend_from_slice(&t.values()[src * block..(src + 1) * block]);
        }
        let rotated = AttentionTensor::new(0, h, t.num_queries(), t.num_keys(), g * g, values).unwrap();
        let (a, _) = extract_map(&t, &meta, g, DEFAULT_EPSILON).unwrap();
        let (b, _) = extract_map(&rotated, &meta, g, DEFAULT_EPSILON).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn excluded_queries_are_ignored((t, meta, g) in softmax_tensor(), noise in 0.0f32..1.0) {
        // overwrite every non-content row; the map must not move
        let mut values = t.values().to_vec();
        for h in 0..t.num_heads() {
            for (q, role) in meta.query_roles.iter().enumerate() {
                if *role != QueryRole::Content {
                    let start = t.index(h, q, 0);
                    values[start..start + t.num_keys()].iter_mut().enumerate()
                        .for_each(|(j, x)| *x = noise * (j as f32 + 1.0));
                }
            }
        }
        let other = AttentionTensor::new(0, t.num_heads(), t.num_queries(), t.num_keys(), g * g, values).unwrap();
        let (a, _) = extract_map(&t, &meta, g, DEFAULT_EPSILON).unwrap();
        let (b, _) = extract_map(&other, &meta, g, DEFAULT_EPSILON).unwrap();
        prop_assert_eq!(a.values, b.values);
    }
}

#[test]
fn toy_decoder_maps_keep_unit_mass() {
    for seed in 0..5 {
        let dec = ToyDecoder::new(DecoderConfig::default().with_seed(seed)).unwrap();
        let tok = dec.tokenizer();
        let seq = TokenSequence::from_text(tok, 64, "<image>clarify Get the red mug", "<loc0001>");
        let meta = seq.token_meta(tok);
        for layer in 0..dec.config().num_layers {
            let t = dec.forward_attention(&seq, layer).unwrap();
            let (_, trace) = extract_map(&t, &meta, 8, DEFAULT_EPSILON).unwrap();
            let s: f64 = trace.pooled.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "seed {seed} layer {layer}: {s}");
        }
    }
}
