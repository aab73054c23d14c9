use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::model::{Batch, ModelParams};

/// One-vs-rest confusion counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tn + self.tp, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`, zero when the class is never seen nor predicted.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub counts: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl Metrics {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Self {
        assert_eq!(predictions.len(), labels.len(), "one prediction per label");
        let n = labels.len();
        let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        let per_class: Vec<ClassMetrics> = (0..num_classes)
            .map(|c| {
                let mut counts = Confusion::default();
                for (&p, &y) in predictions.iter().zip(labels) {
                    match (p == c, y == c) {
                        (true, true) => counts.tp += 1,
                        (true, false) => counts.fp += 1,
                        (false, true) => counts.fn_ += 1,
                        (false, false) => counts.tn += 1,
                    }
                }
                ClassMetrics {
                    class: c,
                    counts,
                    precision: counts.precision(),
                    recall: counts.recall(),
                    f1: counts.f1(),
                }
            })
            .collect();
        let macro_f1 = if num_classes == 0 {
            0.0
        } else {
            per_class.iter().map(|c| c.f1).sum::<f64>() / num_classes as f64
        };
        Metrics {
            samples: n,
            accuracy: ratio(correct, n),
            macro_f1,
            per_class,
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 256;

/// Eval-mode predictions for every record, in dataset order.
pub fn predict(model: &ModelParams, dataset: &Dataset) -> Result<Vec<usize>> {
    let chunks: Vec<Vec<usize>> = dataset
        .records
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let batch = Batch::from_records(chunk)?;
            let logits = model.logits(&batch.text, &batch.image)?;
            Ok(logits.data().chunks(model.num_classes()).map(argmax).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Accuracy, macro-F1 and one-vs-rest counts of `model` on `dataset`.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<Metrics> {
    let preds = predict(model, dataset)?;
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.label).collect();
    Ok(Metrics::from_predictions(&preds, &labels, model.num_classes()))
}
