//! Evaluation metrics: accuracy, confusion-matrix mIoU, and mPT.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Index of the largest entry; ties break toward the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Square confusion matrix over class ids.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        debug_assert!(truth < self.classes && pred < self.classes);
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Intersection-over-union of one class; `None` when the class appears
    /// in neither prediction nor truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fp: u64 = (0..self.classes)
            .filter(|&t| t != class)
            .map(|t| self.count(t, class))
            .sum();
        let fn_: u64 = (0..self.classes)
            .filter(|&p| p != class)
            .map(|p| self.count(class, p))
            .sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }

    /// Mean IoU over classes present in prediction or truth.
    pub fn miou(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.classes {
            if let Some(v) = self.iou(c) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Fraction of diagonal mass: overall pixel/sample accuracy.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        correct as f64 / total as f64
    }
}

/// Mean of per-target metrics (mPT).
pub fn mean_performance(per_target: &[f64]) -> Result<f64> {
    if per_target.is_empty() {
        return Err(CoreError::InvalidArgument(alloc::string::String::from(
            "mPT of an empty metric list",
        )));
    }
    Ok(per_target.iter().sum::<f64>() / per_target.len() as f64)
}
