use crate::aggregate::AmbiguityMap;

/// Local maxima of `m` strictly above `min_height`, picked greedily from the
/// highest down so that every pair is at least `min_separation` apart in
/// Chebyshev distance. A cell is a local maximum when no 8-neighbour is
/// larger. Ties in height resolve in row-major order.
pub fn localize_peaks(m: &AmbiguityMap, min_separation: usize, min_height: f64) -> Vec<(usize, usize)> {
    let g = m.grid_side;
    let mut candidates = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let v = m.get(r, c);
            if v <= min_height {
                continue;
            }
            let is_max = (r.saturating_sub(1)..(r + 2).min(g))
                .flat_map(|nr| (c.saturating_sub(1)..(c + 2).min(g)).map(move |nc| (nr, nc)))
                .all(|(nr, nc)| m.get(nr, nc) <= v);
            if is_max {
                candidates.push((v, r, c));
            }
        }
    }
    // stable sort keeps row-major order among equal heights
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut picked: Vec<(usize, usize)> = Vec::new();
    for (_, r, c) in candidates {
        let far_enough = picked
            .iter()
            .all(|&(pr, pc)| pr.abs_diff(r).max(pc.abs_diff(c)) >= min_separation);
        if far_enough {
            picked.push((r, c));
        }
    }
    picked
}
