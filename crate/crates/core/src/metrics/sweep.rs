use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::{classification_metrics, MetricsError, REFERENCE_SWEEP_PEAK_F1, REFERENCE_SWEEP_PEAK_LAYER};
use crate::aggregate::{extract_map, AggregateError, DEFAULT_EPSILON};
use crate::decoder::{DecoderConfig, DecoderError, TokenSequence, ToyDecoder};
use crate::probe::{confusion, train_split, LabeledMap, ProbeError, TrainConfig};
use crate::rng::{derive_seed, seeded};
use crate::synth::SyntheticScene;

const STREAM_SPLIT: u64 = 3;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("no layers requested")]
    NoLayers,
    #[error("layer list must be strictly increasing, got {0:?}")]
    LayerOrder(Vec<usize>),
    #[error("layer {layer} out of range for a {num_layers}-block decoder")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("test fraction {0} must leave both splits non-empty")]
    Split(f64),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            train: TrainConfig {
                optimizer: crate::probe::AdamWConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                ..TrainConfig::default()
            },
            test_fraction: 0.2,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSweepResult {
    pub rows: Vec<LayerRow>,
    pub seed: u64,
    /// Full-scale figures kept for comparison only.
    pub reference_peak_layer: usize,
    pub reference_peak_f1: f64,
}

impl LayerSweepResult {
    /// Fixed-width text table, one line per layer.
    pub fn render_table(&self) -> String {
        let mut out = format!("{:>5}  {:>8}  {:>8}\n", "layer", "f1", "accuracy");
        for r in &self.rows {
            out.push_str(&format!("{:>5}  {:>8.4}  {:>8.4}\n", r.layer, r.f1, r.accuracy));
        }
        out
    }
}

/// Decoder prompt for a scene: the object inventory stands in for the image
/// content, followed by the instruction.
pub fn scene_prompt(scene: &SyntheticScene) -> String {
    format!("<image>clarify {}: {}", scene.inventory(), scene.instruction)
}

/// For every requested block, maps each scene through the toy decoder and
/// the aggregation pipeline, trains a fresh probe on one split and scores it
/// on the other. Pure in `(layers, scenes, cfg)`.
pub fn layer_sweep(
    layers: &[usize],
    scenes: &[SyntheticScene],
    cfg: &SweepConfig,
) -> Result<LayerSweepResult, SweepError> {
    if layers.is_empty() {
        return Err(SweepError::NoLayers);
    }
    if layers.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SweepError::LayerOrder(layers.to_vec()));
    }
    let num_layers = cfg.decoder.num_layers;
    if let Some(&layer) = layers.iter().find(|&&l| l >= num_layers) {
        return Err(SweepError::LayerOutOfRange { layer, num_layers });
    }

    let n_test = (scenes.len() as f64 * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= scenes.len() {
        return Err(SweepError::Split(cfg.test_fraction));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut seeded(derive_seed(cfg.seed, STREAM_SPLIT)));
    let (test_idx, train_idx) = order.split_at(n_test);

    let decoder = ToyDecoder::new(cfg.decoder.clone())?;
    let sequences: Vec<TokenSequence> = scenes
        .iter()
        .map(|s| TokenSequence::from_text(decoder.tokenizer(), cfg.decoder.num_image_tokens, &scene_prompt(s), ""))
        .collect();
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };

    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        let maps = sequences
            .par_iter()
            .zip(scenes)
            .map(|(seq, scene)| -> Result<LabeledMap, SweepError> {
                let t = decoder.forward_attention(seq, layer)?;
                let meta = seq.token_meta(decoder.tokenizer());
                let (map, _) = extract_map(&t, &meta, cfg.decoder.grid_side, DEFAULT_EPSILON)?;
                Ok(LabeledMap::new(map, scene.label)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| maps[i].clone()).collect::<Vec<_>>();
        let (train_set, test_set) = (pick(train_idx), pick(test_idx));
        let (params, _) = train_split(&train_set, &[], &train_cfg)?;
        let report = classification_metrics(&confusion(&params, &test_set, train_cfg.threshold)?)?;
        rows.push(LayerRow {
            layer,
            f1: report.f1,
            accuracy: report.accuracy,
        });
    }
    Ok(LayerSweepResult {
        rows,
        seed: cfg.seed,
        reference_peak_layer: REFERENCE_SWEEP_PEAK_LAYER,
        reference_peak_f1: REFERENCE_SWEEP_PEAK_F1,
    })
}
