//! Box overlap, binary classification scores and the decoder-layer sweep.

mod sweep;

pub use sweep::{layer_sweep, scene_prompt, LayerRow, LayerSweepResult, SweepConfig, SweepError};

use serde::Serialize;
use thiserror::Error;

use crate::loc::BoxNorm;

/// In-domain F1 of the half-depth CNN detector on the real benchmark.
pub const REFERENCE_F1_IN_DOMAIN: f64 = 0.846;
/// Out-of-domain F1 of the same detector.
pub const REFERENCE_F1_OUT_OF_DOMAIN: f64 = 0.765;
/// Best single-layer F1 of the full-scale layer sweep, reached at layer 14.
pub const REFERENCE_SWEEP_PEAK_F1: f64 = 0.726;
pub const REFERENCE_SWEEP_PEAK_LAYER: usize = 14;
/// Guesser Acc@0.5 (percent) of the TiO baseline and of the full system.
pub const REFERENCE_GUESSER_ACC_TIO: f64 = 71.2;
pub const REFERENCE_GUESSER_ACC_CLUE: f64 = 75.66;

/// Intersection over union of two boxes; 0 when the union has zero area.
pub fn iou(a: &BoxNorm, b: &BoxNorm) -> f64 {
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("confusion counts are all zero")]
    EmptyCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts from parallel prediction and label slices.
pub fn confusion_from(predicted: &[bool], actual: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        c.record(p, a);
    }
    c
}

/// Which scores hit a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ZeroDivision {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl ZeroDivision {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub zero_division: ZeroDivision,
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationReport, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, p_zero) = ratio(c.tp, c.tp + c.fp);
    let (recall, r_zero) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f_zero) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    Ok(ClassificationReport {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
        zero_division: ZeroDivision {
            precision: p_zero,
            recall: r_zero,
            f1: f_zero,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(y0: f64, x0: f64, y1: f64, x1: f64) -> BoxNorm {
        BoxNorm::new(y0, x0, y1, x1).unwrap()
    }

    #[test]
    fn iou_analytic_cases() {
        let a = b(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(0.6, 0.6, 0.9, 0.9)), 0.0);
        let unit = b(0.0, 0.0, 0.5, 0.5);
        let shifted = b(0.0, 0.25, 0.5, 0.75);
        assert!((iou(&unit, &shifted) - 1.0 / 3.0).abs() < 1e-12);
        let point = b(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&point, &point), 0.0);
    }

    #[test]
    fn perfect_scores() {
        let r = classification_metrics(&ConfusionCounts::new(1, 0, 1, 0)).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!r.zero_division.any());
    }

    #[test]
    fn zero_division_is_flagged() {
        let r = classification_metrics(&ConfusionCounts::new(0, 0, 5, 3)).unwrap();
        assert_eq!(r.precision, 0.0);
        assert!(r.zero_division.precision);
        assert!(r.zero_division.f1);
        assert_eq!(
            classification_metrics(&ConfusionCounts::default()),
            Err(MetricsError::EmptyCounts)
        );
    }

    #[test]
    fn reference_scale_counts() {
        let r = classification_metrics(&ConfusionCounts::new(846, 153, 847, 154)).unwrap();
        assert!((r.f1 - REFERENCE_F1_IN_DOMAIN).abs() < 5e-4, "{}", r.f1);
        let harmonic = 2.0 / (1.0 / r.precision + 1.0 / r.recall);
        assert!((r.f1 - harmonic).abs() < 1e-12);
    }

    #[test]
    fn confusion_from_slices() {
        let c = confusion_from(&[true, true, false, false], &[true, false, false, true]);
        assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
    }
}
