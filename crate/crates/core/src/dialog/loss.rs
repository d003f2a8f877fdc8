//! Cross-entropy restricted to suffix positions.

use super::DialogError;

fn check(logits: &[f64], vocab_size: usize, target_ids: &[u32], suffix_start: usize) -> Result<usize, DialogError> {
    if vocab_size == 0 || !logits.len().is_multiple_of(vocab_size) {
        return Err(DialogError::Shape(format!(
            "{} logits do not form rows of {vocab_size}",
            logits.len()
        )));
    }
    let total = logits.len() / vocab_size;
    if suffix_start >= total || target_ids.is_empty() {
        return Err(DialogError::EmptySuffix);
    }
    if target_ids.len() != total - suffix_start {
        return Err(DialogError::Shape(format!(
            "{} targets for {} suffix positions",
            target_ids.len(),
            total - suffix_start
        )));
    }
    if let Some(&id) = target_ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(DialogError::TargetOutOfVocab { id, vocab_size });
    }
    Ok(total)
}

/// Numerically stable `log Σ exp`.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Mean of `-log softmax(logits[p])[target_ids[p - suffix_start]]` over the
/// suffix positions `p ≥ suffix_start`. `logits` is `T×V` row-major and rows
/// before `suffix_start` are never read.
pub fn masked_ce(
    logits: &[f64],
    vocab_size: usize,
    target_ids: &[u32],
    suffix_start: usize,
) -> Result<f64, DialogError> {
    check(logits, vocab_size, target_ids, suffix_start)?;
    let mut sum = 0.0;
    for (i, &target) in target_ids.iter().enumerate() {
        let row = &logits[(suffix_start + i) * vocab_size..(suffix_start + i + 1) * vocab_size];
        sum += log_sum_exp(row) - row[target as usize];
    }
    Ok(sum / target_ids.len() as f64)
}

/// Gradient of [`masked_ce`] with respect to every logit. Prefix rows are
/// exactly zero.
pub fn masked_ce_grad(
    logits: &[f64],
    vocab_size: usize,
    target_ids: &[u32],
    suffix_start: usize,
) -> Result<Vec<f64>, DialogError> {
    check(logits, vocab_size, target_ids, suffix_start)?;
    let mut grad = vec![0.0; logits.len()];
    let scale = 1.0 / target_ids.len() as f64;
    for (i, &target) in target_ids.iter().enumerate() {
        let range = (suffix_start + i) * vocab_size..(suffix_start + i + 1) * vocab_size;
        let row = &logits[range.clone()];
        let lse = log_sum_exp(row);
        for (g, &l) in grad[range].iter_mut().zip(row) {
            *g = (l - lse).exp() * scale;
        }
        grad[(suffix_start + i) * vocab_size + target as usize] -= scale;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 37;
        let logits = vec![0.3; 5 * v];
        let loss = masked_ce(&logits, v, &[1, 2, 3], 2).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_token_scalar_oracle() {
        let logits = [9.0, 9.0, 9.0, 1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
        let ce = |row: [f64; 3], t: usize| {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            -(row[t].exp() / z).ln()
        };
        let expected = (ce([1.0, 2.0, 3.0], 0) + ce([-1.0, 0.5, 4.0], 2)) / 2.0;
        assert!((masked_ce(&logits, 3, &[0, 2], 1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.4 - 0.8).collect();
        let targets = [1, 3];
        let g = masked_ce_grad(&logits, 4, &targets, 1).unwrap();
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (masked_ce(&up, 4, &targets, 1).unwrap() - masked_ce(&down, 4, &targets, 1).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
        assert!(g[..4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn errors() {
        assert_eq!(masked_ce(&[0.0; 6], 3, &[], 2), Err(DialogError::EmptySuffix));
        assert!(matches!(masked_ce(&[0.0; 6], 4, &[0], 1), Err(DialogError::Shape(_))));
        assert!(matches!(
            masked_ce(&[0.0; 6], 3, &[0, 1], 1),
            Err(DialogError::Shape(_))
        ));
        assert_eq!(
            masked_ce(&[0.0; 6], 3, &[3], 1),
            Err(DialogError::TargetOutOfVocab { id: 3, vocab_size: 3 })
        );
    }
}
