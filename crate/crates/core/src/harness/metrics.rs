use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split-level accuracy summary. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub mean1: f64,
    /// Only classes with at least one sample.
    pub per_class_top1: BTreeMap<usize, f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

/// Position of `label` when classes are sorted by descending logit, ties
/// going to the lower index.
pub fn rank_of(logits: &[f64], label: usize) -> usize {
    let y = logits[label];
    logits.iter().enumerate().filter(|&(j, &v)| v > y || (v == y && j < label)).count()
}

/// Argmax with ties broken toward the lower index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = j;
        }
    }
    best
}

impl EvalReport {
    pub fn from_logits(logits: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptySplit);
        }
        if logits.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} logit rows, {} labels", logits.len(), labels.len())));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        let (mut hit1, mut hit5) = (0usize, 0usize);
        let mut per = vec![(0usize, 0usize); num_classes];
        for (row, &y) in logits.iter().zip(labels) {
            if y >= num_classes || row.len() != num_classes {
                return Err(Error::LabelOutOfRange { label: y, num_classes });
            }
            let r = rank_of(row, y);
            hit1 += (r == 0) as usize;
            hit5 += (r < 5) as usize;
            per[y].0 += (r == 0) as usize;
            per[y].1 += 1;
            confusion[y][predict(row)] += 1;
        }
        let n = labels.len();
        let pct = |a: usize, b: usize| 100.0 * a as f64 / b as f64;
        let per_class_top1: BTreeMap<usize, f64> =
            per.iter().enumerate().filter(|(_, p)| p.1 > 0).map(|(c, p)| (c, pct(p.0, p.1))).collect();
        let mean1 = per_class_top1.values().sum::<f64>() / per_class_top1.len() as f64;
        Ok(Self { top1: pct(hit1, n), top5: pct(hit5, n), mean1, per_class_top1, confusion, n_samples: n })
    }
}
