//! Mini-batch training of the probe.

use rand::seq::SliceRandom;

use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::{backward_batch, init_params, predict, LabeledMap, ProbeError, ProbeParams};
use crate::metrics::{classification_metrics, ConfusionCounts};
use crate::rng::{derive_seed, seeded};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_SPLIT: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Share of the dataset [`train`] holds out for validation.
    pub validation_fraction: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            seed: 42,
            validation_fraction: 0.15,
            threshold: super::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's batches.
    pub train_loss: f64,
    pub val_f1: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Confusion counts of `params` on `data`.
pub fn confusion(params: &ProbeParams, data: &[LabeledMap], threshold: f64) -> Result<ConfusionCounts, ProbeError> {
    let mut counts = ConfusionCounts::default();
    for sample in data {
        let pred = predict(params, &sample.map, threshold)?;
        counts.record(pred.ambiguous, sample.label == 1);
    }
    Ok(counts)
}

/// Holds out `cfg.validation_fraction` of a seeded shuffle of `dataset` and
/// trains on the rest.
pub fn train(dataset: &[LabeledMap], cfg: &TrainConfig) -> Result<(ProbeParams, TrainHistory), ProbeError> {
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(ProbeError::Config(format!(
            "validation_fraction {} outside [0, 1)",
            cfg.validation_fraction
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seeded(derive_seed(cfg.seed, STREAM_SPLIT)));
    let n_val = (dataset.len() as f64 * cfg.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    train_split(&pick(train_idx), &pick(val_idx), cfg)
}

/// Trains a fresh probe on `train_set`, scoring `val_set` (if non-empty)
/// after every epoch. Deterministic in `cfg.seed`.
pub fn train_split(
    train_set: &[LabeledMap],
    val_set: &[LabeledMap],
    cfg: &TrainConfig,
) -> Result<(ProbeParams, TrainHistory), ProbeError> {
    let first = train_set.first().ok_or(ProbeError::EmptyDataset)?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ProbeError::Config("epochs and batch_size must be positive".into()));
    }
    let positives = train_set.iter().filter(|s| s.label == 1).count();
    if positives == 0 {
        return Err(ProbeError::SingleClass(0));
    }
    if positives == train_set.len() {
        return Err(ProbeError::SingleClass(1));
    }

    let mut params = init_params(first.map.grid_side, derive_seed(cfg.seed, STREAM_INIT))?;
    let mut state = OptimizerState::new(&params, cfg.optimizer);
    let mut rng = seeded(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledMap> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = backward_batch(&params, &batch)?;
            loss_sum += loss * batch.len() as f64;
            adamw_step(&mut params, &grads, &mut state)?;
        }
        let (val_f1, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let report = classification_metrics(&confusion(&params, val_set, cfg.threshold)?)
                .expect("validation set is non-empty");
            (Some(report.f1), Some(report.accuracy))
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_f1,
            val_accuracy,
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::AmbiguityMap;

    /// Label 1 maps are bright, label 0 maps dark.
    fn separable(n: usize, g: usize) -> Vec<LabeledMap> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let level = if label == 1 { 0.8 } else { 0.1 };
                let values = (0..g * g).map(|k| level + 0.05 * ((k + i) % 3) as f64).collect();
                LabeledMap::new(AmbiguityMap::from_values(g, values).unwrap(), label).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = separable(10, 4).into_iter().filter(|s| s.label == 1).collect();
        assert_eq!(
            train(&data, &TrainConfig::default()).unwrap_err(),
            ProbeError::SingleClass(1)
        );
        assert_eq!(
            train(&[], &TrainConfig::default()).unwrap_err(),
            ProbeError::EmptyDataset
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(40, 4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&data, &cfg).unwrap();
        let (b, hb) = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), 2);
        assert!(ha.epochs[0].val_f1.is_some());
    }

    #[test]
    fn separable_loss_decreases_for_three_epochs() {
        let data = separable(64, 8);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (_, h) = train(&data, &cfg).unwrap();
        let losses: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses.windows(2).take(3).all(|w| w[1] < w[0]), "{losses:?}");
    }
}
