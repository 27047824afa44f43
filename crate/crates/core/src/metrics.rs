//! Segmentation metrics: confusion accumulation, pixel accuracy, IoU, DSC.
//!
//! Metrics are computed once globally from a dataset-level confusion matrix
//! (not averaged per image), which makes them invariant to how the data was
//! batched. Classes absent from both ground truth and prediction are
//! excluded from the class means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Shape;

/// Rows are ground truth, columns are prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one batch of per-pixel predictions against labels.
    pub fn accumulate(&mut self, predictions: &[u16], labels: &[u16]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::config(format!(
                "confusion: {} predictions vs {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        for (&p, &y) in predictions.iter().zip(labels) {
            let (p, y) = (p as usize, y as usize);
            if p >= self.classes || y >= self.classes {
                return Err(Error::data(format!("confusion: class out of range ({y}, {p})")));
            }
            self.counts[y * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Accumulation is associative: merging per-batch matrices equals one
    /// pass over the concatenation.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.classes)
            .map(|t| self.counts[t * self.classes..][..self.classes].to_vec())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<ConfusionMatrix> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::data("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { classes, counts: rows.iter().flatten().copied().collect() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub iou: f64,
    pub dsc: f64,
    /// Whether the class appears in ground truth or prediction at all.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub dsc: f64,
    pub num_pixels: u64,
    pub per_class: Vec<ClassMetrics>,
}

/// Derive all metrics from a confusion matrix.
/// IoU_c = TP/(TP+FP+FN), DSC_c = 2TP/(2TP+FP+FN), means over present
/// classes; pixel accuracy = trace/total.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsRecord> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("cannot compute metrics from an empty confusion matrix"));
    }
    let mut trace = 0u64;
    let mut per_class = Vec::with_capacity(cm.classes);
    let mut iou_sum = 0.0;
    let mut dsc_sum = 0.0;
    let mut present_count = 0usize;
    for c in 0..cm.classes {
        let tp = cm.count(c, c);
        trace += tp;
        let fp: u64 = (0..cm.classes).filter(|&t| t != c).map(|t| cm.count(t, c)).sum();
        let fng: u64 = (0..cm.classes).filter(|&p| p != c).map(|p| cm.count(c, p)).sum();
        let present = tp + fp + fng > 0;
        let (iou, dsc) = if present {
            (
                tp as f64 / (tp + fp + fng) as f64,
                2.0 * tp as f64 / (2 * tp + fp + fng) as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if present {
            iou_sum += iou;
            dsc_sum += dsc;
            present_count += 1;
        }
        per_class.push(ClassMetrics { class: c, iou, dsc, present });
    }
    let present_count = present_count.max(1);
    Ok(MetricsRecord {
        pixel_accuracy: trace as f64 / total as f64,
        miou: iou_sum / present_count as f64,
        dsc: dsc_sum / present_count as f64,
        num_pixels: total,
        per_class,
    })
}

/// Per-pixel argmax over the channel dimension (ties -> lowest class).
pub fn argmax_channels<S: Scalar>(logits: &[S], shape: Shape) -> Vec<u16> {
    let hw = shape.h * shape.w;
    let mut out = vec![0u16; shape.n * hw];
    for n in 0..shape.n {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = logits[(n * shape.c) * hw + p];
            for c in 1..shape.c {
                let v = logits[(n * shape.c + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[n * hw + p] = best as u16;
        }
    }
    out
}
