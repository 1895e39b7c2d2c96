//! Dice and Jaccard overlap scores.
//!
//! Scores are aggregated per class over a whole evaluation set: intersections
//! and cardinalities are summed across images before dividing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub per_class_dice: Vec<f64>,
    pub per_class_jac: Vec<f64>,
    pub mean_dice: f64,
    pub mean_jac: f64,
}

/// Running per-class overlap counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapCounts {
    intersection: Vec<u64>,
    predicted: Vec<u64>,
    reference: Vec<u64>,
}

impl OverlapCounts {
    pub fn new(classes: usize) -> Self {
        OverlapCounts {
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            reference: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn add(&mut self, pred: &LabelMap, reference: &LabelMap) -> Result<()> {
        pred.same_shape(reference)
            .map_err(|e| Error::shape(format!("prediction vs reference: {e}")))?;
        let classes = self.classes();
        pred.check_classes(classes)?;
        reference.check_classes(classes)?;
        for (&p, &r) in pred.data().iter().zip(reference.data()) {
            self.predicted[p as usize] += 1;
            self.reference[r as usize] += 1;
            if p == r {
                self.intersection[p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Scores with means over classes present in the reference.
    pub fn metrics(&self) -> SegMetrics {
        self.metrics_over(0..self.classes())
    }

    /// Scores with means restricted to `classes` (still only those present in
    /// the reference). Per-class vectors always cover every class.
    pub fn metrics_over(&self, classes: impl IntoIterator<Item = usize>) -> SegMetrics {
        let c = self.classes();
        let mut dice = Vec::with_capacity(c);
        let mut jac = Vec::with_capacity(c);
        for k in 0..c {
            let inter = self.intersection[k] as f64;
            let total = (self.predicted[k] + self.reference[k]) as f64;
            let union = total - inter;
            if total == 0.0 {
                dice.push(1.0);
                jac.push(1.0);
            } else {
                dice.push(2.0 * inter / total);
                jac.push(inter / union);
            }
        }
        let present: Vec<usize> = classes
            .into_iter()
            .filter(|&k| k < c && self.reference[k] > 0)
            .collect();
        let mean = |v: &[f64]| {
            if present.is_empty() {
                1.0
            } else {
                present.iter().map(|&k| v[k]).sum::<f64>() / present.len() as f64
            }
        };
        SegMetrics {
            mean_dice: mean(&dice),
            mean_jac: mean(&jac),
            per_class_dice: dice,
            per_class_jac: jac,
        }
    }
}

pub fn dice_jaccard(pred: &LabelMap, reference: &LabelMap, classes: usize) -> Result<SegMetrics> {
    let mut counts = OverlapCounts::new(classes);
    counts.add(pred, reference)?;
    Ok(counts.metrics())
}
