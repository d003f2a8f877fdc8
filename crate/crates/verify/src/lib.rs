//! Slow, obviously-correct reference computations used to check
//! `clue-core`. Nothing here shares code with the crate under test.

use regex::Regex;

/// Pooled image vector and min-max map of a raw `H×Q×K` attention buffer,
/// computed with plain nested loops.
///
/// `content[q]` marks the queries that are averaged. Every content row is
/// divided by its own image mass plus `epsilon` before pooling.
pub fn aggregate_reference(
    values: &[f32],
    heads: usize,
    queries: usize,
    keys: usize,
    image_tokens: usize,
    content: &[bool],
    epsilon: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(values.len(), heads * queries * keys);
    assert_eq!(content.len(), queries);
    let at = |h: usize, q: usize, k: usize| values[(h * queries + q) * keys + k] as f64;
    let picked = content.iter().filter(|&&c| c).count();
    let mut pooled = vec![0.0f64; image_tokens];
    for q in (0..queries).filter(|&q| content[q]) {
        for h in 0..heads {
            let mut mass = 0.0;
            for j in 0..image_tokens {
                mass += at(h, q, j);
            }
            for (k, slot) in pooled.iter_mut().enumerate() {
                *slot += at(h, q, k) / (mass + epsilon);
            }
        }
    }
    for slot in pooled.iter_mut() {
        *slot /= (heads * picked) as f64;
    }
    let lo = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let map = pooled
        .iter()
        .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
        .collect();
    (pooled, map)
}

/// Number of pixel centres `(i + 0.5) / resolution` inside `[lo, hi)`.
fn covered(lo: f64, hi: f64, resolution: usize) -> u64 {
    (0..resolution)
        .filter(|&i| {
            let c = (i as f64 + 0.5) / resolution as f64;
            lo <= c && c < hi
        })
        .count() as u64
}

/// IoU of two `[y_min, x_min, y_max, x_max]` boxes measured on a
/// `resolution × resolution` pixel raster. Axis-aligned boxes cover a
/// rectangle of pixels, so the pixel count factors into rows times columns.
pub fn raster_iou(a: [f64; 4], b: [f64; 4], resolution: usize) -> f64 {
    let area = |r: [f64; 4]| covered(r[0], r[2], resolution) * covered(r[1], r[3], resolution);
    let inter_box = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
    let inter = if inter_box[0] < inter_box[2] && inter_box[1] < inter_box[3] {
        area(inter_box)
    } else {
        0
    };
    let union = area(a) + area(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `-log softmax(row)[target]`, summed without any shifting tricks.
pub fn cross_entropy_reference(row: &[f64], target: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    z.ln() - row[target]
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Location-token reading with a regular expression.
///
/// Runs are maximal chains of directly adjacent `<locDDDD>` tokens with a
/// value below `bins`; a four-digit token out of range breaks the chain. The
/// first window of four consecutive run tokens with `y_min ≤ y_max` and
/// `x_min ≤ x_max` is returned.
pub fn loc_reference(text: &str, bins: u16) -> Option<[u16; 4]> {
    let re = Regex::new(r"<loc([0-9]{4})>").expect("static pattern");
    let mut runs: Vec<Vec<u16>> = Vec::new();
    let mut chain_end = None;
    for caps in re.captures_iter(text) {
        let whole = caps.get(0).expect("group 0");
        let value: u16 = caps[1].parse().expect("four digits");
        if value >= bins {
            chain_end = None;
            continue;
        }
        match (chain_end, runs.last_mut()) {
            (Some(end), Some(run)) if end == whole.start() => run.push(value),
            _ => runs.push(vec![value]),
        }
        chain_end = Some(whole.end());
    }
    runs.iter()
        .flat_map(|r| r.windows(4).map(|w| [w[0], w[1], w[2], w[3]]))
        .find(|w| w[0] <= w[2] && w[1] <= w[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_known_values() {
        let unit = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(raster_iou(unit, unit, 64), 1.0);
        assert_eq!(raster_iou([0.0, 0.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0], 64), 0.0);
        let shifted = raster_iou([0.0, 0.0, 0.5, 0.5], [0.0, 0.25, 0.5, 0.75], 64);
        assert!((shifted - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_reference_on_two_heads() {
        // one query, keys [img, img, text]
        let values = [0.2f32, 0.6, 0.2, 0.5, 0.25, 0.25];
        let (pooled, map) = aggregate_reference(&values, 2, 1, 3, 2, &[true], 0.0);
        let expect = [(0.25 + 2.0 / 3.0) / 2.0, (0.75 + 1.0 / 3.0) / 2.0];
        for (p, e) in pooled.iter().zip(expect) {
            assert!((p - e).abs() < 1e-7);
        }
        assert_eq!(map, vec![0.0, 1.0]);
    }

    #[test]
    fn loc_reference_windows() {
        let t = "<loc0005><loc0001><loc0002><loc0003><loc0004>";
        assert_eq!(loc_reference(t, 1024), Some([1, 2, 3, 4]));
        assert_eq!(loc_reference("<loc0001> <loc0002><loc0003><loc0004>", 1024), None);
        assert_eq!(
            loc_reference("<loc1024><loc0001><loc0002><loc0003><loc0004>", 1024),
            Some([1, 2, 3, 4])
        );
    }

    #[test]
    fn cross_entropy_uniform() {
        assert!((cross_entropy_reference(&[0.0; 8], 3) - 8f64.ln()).abs() < 1e-15);
    }
}
