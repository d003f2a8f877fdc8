//! Lightweight CNN mapping an ambiguity map to `p_amb`.
//!
//! ```text
//! map G×G ─ conv 1→8 3×3 pad 1 ─ ReLU ─ maxpool 2
//!         ─ conv 8→16 3×3 pad 1 ─ ReLU ─ maxpool 2
//!         ─ flatten 16·(G/4)² ─ fc →64 ─ ReLU ─ fc →1 ─ sigmoid
//! ```
//!
//! Everything is plain f64 loops; gradients are hand-derived and checked
//! against finite differences in the tests.

mod io;
mod optim;
mod peaks;
mod train;

use thiserror::Error;

pub use io::{read_params, write_params, ParamsFileError};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use peaks::localize_peaks;
pub use train::{confusion, train, train_split, EpochRecord, TrainConfig, TrainHistory};

use crate::aggregate::AmbiguityMap;
use crate::rng::{derive_seed, he_uniform, seeded};

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
pub const HIDDEN: usize = 64;
const KERNEL: usize = 9;

/// Floor applied to log arguments in the loss.
pub const LOG_CLAMP: f64 = 1e-12;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("grid side {0} must be a positive multiple of 4")]
    GridNotDivisible(usize),
    #[error("map is {map}×{map}, probe expects {probe}×{probe}")]
    ShapeMismatch { map: usize, probe: usize },
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("gradient tensors do not match the parameters")]
    GradientShape,
    #[error("non-finite gradient component in tensor {tensor} at {index}")]
    NonFiniteGradient { tensor: &'static str, index: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training data holds only label {0}")]
    SingleClass(u8),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Map with its ambiguity label (1 = ambiguous).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMap {
    pub map: AmbiguityMap,
    pub label: u8,
}

impl LabeledMap {
    pub fn new(map: AmbiguityMap, label: u8) -> Result<Self, ProbeError> {
        if label > 1 {
            return Err(ProbeError::BadLabel(label));
        }
        Ok(Self { map, label })
    }
}

/// Probe weights. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub grid_side: usize,
    /// `8×1×3×3`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `16×8×3×3`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `64×(16·(G/4)²)`
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    /// `1×64`
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
];

fn check_grid(grid_side: usize) -> Result<(), ProbeError> {
    if grid_side == 0 || !grid_side.is_multiple_of(4) {
        return Err(ProbeError::GridNotDivisible(grid_side));
    }
    Ok(())
}

impl ProbeParams {
    pub fn flat_features(grid_side: usize) -> usize {
        CONV2_CHANNELS * (grid_side / 4) * (grid_side / 4)
    }

    /// Expected length of each tensor, in [`TENSOR_NAMES`] order.
    pub fn tensor_lens(grid_side: usize) -> [usize; 8] {
        let f = Self::flat_features(grid_side);
        [
            CONV1_CHANNELS * KERNEL,
            CONV1_CHANNELS,
            CONV2_CHANNELS * CONV1_CHANNELS * KERNEL,
            CONV2_CHANNELS,
            HIDDEN * f,
            HIDDEN,
            HIDDEN,
            1,
        ]
    }

    pub fn zeros(grid_side: usize) -> Result<Self, ProbeError> {
        check_grid(grid_side)?;
        let l = Self::tensor_lens(grid_side);
        Ok(Self {
            grid_side,
            conv1_w: vec![0.0; l[0]],
            conv1_b: vec![0.0; l[1]],
            conv2_w: vec![0.0; l[2]],
            conv2_b: vec![0.0; l[3]],
            fc1_w: vec![0.0; l[4]],
            fc1_b: vec![0.0; l[5]],
            fc2_w: vec![0.0; l[6]],
            fc2_b: vec![0.0; l[7]],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.grid_side).expect("grid already validated")
    }

    pub fn tensors(&self) -> [&Vec<f64>; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid_side == other.grid_side
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// He-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(grid_side: usize, seed: u64) -> Result<ProbeParams, ProbeError> {
    let mut p = ProbeParams::zeros(grid_side)?;
    let fan_in = [
        KERNEL,
        0,
        CONV1_CHANNELS * KERNEL,
        0,
        ProbeParams::flat_features(grid_side),
        0,
        HIDDEN,
        0,
    ];
    for (i, (t, fan)) in p.tensors_mut().into_iter().zip(fan_in).enumerate() {
        if fan > 0 {
            *t = he_uniform(&mut seeded(derive_seed(seed, i as u64)), t.len(), fan);
        }
    }
    Ok(p)
}

fn conv3x3_forward(input: &[f64], c_in: usize, weights: &[f64], bias: &[f64], side: usize) -> Vec<f64> {
    let c_out = bias.len();
    let plane = side * side;
    let mut out = vec![0.0; c_out * plane];
    for co in 0..c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..c_in {
            let x = &input[ci * plane..(ci + 1) * plane];
            let w = &weights[(co * c_in + ci) * KERNEL..(co * c_in + ci + 1) * KERNEL];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[ky * 3 + kx];
                    // output (y, x) reads input (y + ky - 1, x + kx - 1)
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (side + 1 - ky).min(side);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (side + 1 - kx).min(side);
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = &mut o[y * side..(y + 1) * side];
                        let irow = &x[iy * side..(iy + 1) * side];
                        for xx in x_lo..x_hi {
                            orow[xx] += wv * irow[xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    grad_out: &[f64],
    c_out: usize,
    side: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let plane = side * side;
    let mut grad_in = want_input.then(|| vec![0.0; c_in * plane]);
    for co in 0..c_out {
        let go = &grad_out[co * plane..(co + 1) * plane];
        grad_b[co] += go.iter().sum::<f64>();
        for ci in 0..c_in {
            let x = &input[ci * plane..(ci + 1) * plane];
            let base = (co * c_in + ci) * KERNEL;
            for ky in 0..3 {
                for kx in 0..3 {
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (side + 1 - ky).min(side);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (side + 1 - kx).min(side);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        for xx in x_lo..x_hi {
                            acc += go[y * side + xx] * x[iy * side + xx + kx - 1];
                        }
                    }
                    grad_w[base + ky * 3 + kx] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let wv = weights[base + ky * 3 + kx];
                        let gi = &mut gi[ci * plane..(ci + 1) * plane];
                        for y in y_lo..y_hi {
                            let iy = y + ky - 1;
                            for xx in x_lo..x_hi {
                                gi[iy * side + xx + kx - 1] += wv * go[y * side + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// 2×2 max pooling; also returns the winning input index of each output.
fn maxpool2(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut arg = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * side + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * side + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Sigmoid kept strictly inside `(0, 1)`.
fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Activations kept for the backward pass.
struct Activations {
    input: Vec<f64>,
    a1: Vec<f64>,
    arg1: Vec<usize>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    arg2: Vec<usize>,
    flat: Vec<f64>,
    a3: Vec<f64>,
    prob: f64,
}

fn forward_cached(p: &ProbeParams, m: &AmbiguityMap) -> Result<Activations, ProbeError> {
    if m.grid_side != p.grid_side || m.values.len() != p.grid_side * p.grid_side {
        return Err(ProbeError::ShapeMismatch {
            map: m.grid_side,
            probe: p.grid_side,
        });
    }
    let g = p.grid_side;
    let input = m.values.clone();
    let mut a1 = conv3x3_forward(&input, 1, &p.conv1_w, &p.conv1_b, g);
    relu(&mut a1);
    let (p1, arg1) = maxpool2(&a1, CONV1_CHANNELS, g);
    let mut a2 = conv3x3_forward(&p1, CONV1_CHANNELS, &p.conv2_w, &p.conv2_b, g / 2);
    relu(&mut a2);
    let (flat, arg2) = maxpool2(&a2, CONV2_CHANNELS, g / 2);

    let f = flat.len();
    let mut a3: Vec<f64> = (0..HIDDEN)
        .map(|j| {
            let w = &p.fc1_w[j * f..(j + 1) * f];
            p.fc1_b[j] + w.iter().zip(&flat).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    relu(&mut a3);
    let logit = p.fc2_b[0] + p.fc2_w.iter().zip(&a3).map(|(a, b)| a * b).sum::<f64>();
    Ok(Activations {
        input,
        a1,
        arg1,
        p1,
        a2,
        arg2,
        flat,
        a3,
        prob: sigmoid(logit),
    })
}

/// `p_amb` for one map, strictly inside `(0, 1)`.
pub fn forward(p: &ProbeParams, m: &AmbiguityMap) -> Result<f64, ProbeError> {
    Ok(forward_cached(p, m)?.prob)
}

/// `-y·ln p - (1-y)·ln(1-p)`, log arguments floored at [`LOG_CLAMP`].
pub fn bce_loss(p_amb: f64, y: u8) -> Result<f64, ProbeError> {
    if !(p_amb > 0.0 && p_amb < 1.0) {
        return Err(ProbeError::ProbabilityOutOfRange(p_amb));
    }
    match y {
        1 => Ok(-p_amb.max(LOG_CLAMP).ln()),
        0 => Ok(-(1.0 - p_amb).max(LOG_CLAMP).ln()),
        other => Err(ProbeError::BadLabel(other)),
    }
}

/// Mean loss over a batch of `(p_amb, y)`.
pub fn bce_loss_batch(batch: &[(f64, u8)]) -> Result<f64, ProbeError> {
    if batch.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let total = batch.iter().map(|&(p, y)| bce_loss(p, y)).sum::<Result<f64, _>>()?;
    Ok(total / batch.len() as f64)
}

/// Loss and exact gradient of `bce_loss(forward(p, m), y)` with respect to
/// every parameter.
#[allow(clippy::needless_range_loop)]
pub fn backward(p: &ProbeParams, m: &AmbiguityMap, y: u8) -> Result<(f64, ProbeParams), ProbeError> {
    let act = forward_cached(p, m)?;
    let loss = bce_loss(act.prob, y)?;
    let g = p.grid_side;
    let mut grad = p.zeros_like();

    // d loss / d logit; zero where the log clamp is active
    let target = y as f64;
    let clamped = (y == 1 && act.prob < LOG_CLAMP) || (y == 0 && 1.0 - act.prob < LOG_CLAMP);
    let d_logit = if clamped { 0.0 } else { act.prob - target };

    grad.fc2_b[0] = d_logit;
    let mut d_a3 = vec![0.0; HIDDEN];
    for j in 0..HIDDEN {
        grad.fc2_w[j] = d_logit * act.a3[j];
        d_a3[j] = if act.a3[j] > 0.0 { d_logit * p.fc2_w[j] } else { 0.0 };
    }

    let f = act.flat.len();
    let mut d_flat = vec![0.0; f];
    for j in 0..HIDDEN {
        let dz = d_a3[j];
        if dz == 0.0 {
            continue;
        }
        grad.fc1_b[j] = dz;
        let w = &p.fc1_w[j * f..(j + 1) * f];
        let gw = &mut grad.fc1_w[j * f..(j + 1) * f];
        for k in 0..f {
            gw[k] = dz * act.flat[k];
            d_flat[k] += dz * w[k];
        }
    }

    // unpool 2, then ReLU 2
    let mut d_z2 = vec![0.0; act.a2.len()];
    for (k, &src) in act.arg2.iter().enumerate() {
        if act.a2[src] > 0.0 {
            d_z2[src] += d_flat[k];
        }
    }
    let d_p1 = conv3x3_backward(
        &act.p1,
        CONV1_CHANNELS,
        &p.conv2_w,
        &d_z2,
        CONV2_CHANNELS,
        g / 2,
        &mut grad.conv2_w,
        &mut grad.conv2_b,
        true,
    )
    .expect("input gradient requested");

    let mut d_z1 = vec![0.0; act.a1.len()];
    for (k, &src) in act.arg1.iter().enumerate() {
        if act.a1[src] > 0.0 {
            d_z1[src] += d_p1[k];
        }
    }
    conv3x3_backward(
        &act.input,
        1,
        &p.conv1_w,
        &d_z1,
        CONV1_CHANNELS,
        g,
        &mut grad.conv1_w,
        &mut grad.conv1_b,
        false,
    );
    Ok((loss, grad))
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction is in input order, so results do not depend on
/// scheduling.
pub fn backward_batch(p: &ProbeParams, batch: &[&LabeledMap]) -> Result<(f64, ProbeParams), ProbeError> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let per_sample: Vec<(f64, ProbeParams)> = batch
        .par_iter()
        .map(|s| backward(p, &s.map, s.label))
        .collect::<Result<_, _>>()?;
    let mut grad = p.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        grad.add_assign(g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub ambiguous: bool,
}

/// Ambiguous iff `p_amb >= threshold`.
pub fn predict(p: &ProbeParams, m: &AmbiguityMap, threshold: f64) -> Result<Prediction, ProbeError> {
    let probability = forward(p, m)?;
    Ok(Prediction {
        probability,
        ambiguous: decide(probability, threshold),
    })
}

pub fn decide(probability: f64, threshold: f64) -> bool {
    probability >= threshold
}
