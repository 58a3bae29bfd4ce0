//! Pixel-level segmentation metrics from a confusion matrix.
//!
//! A class enters the means only when it is not the ignore index and
//! `TP + FP + FN > 0`, so a class that never occurs and is never predicted
//! neither helps nor hurts. A class that is predicted but absent from the
//! ground truth counts with IoU and F1 zero.

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
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

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix", "rows must form a square matrix"));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Count aligned ground-truth / prediction maps. Ground-truth pixels
    /// equal to `ignore` are skipped.
    pub fn accumulate(&mut self, gt: &[u32], pred: &[u32], ignore: Option<u32>) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape("confusion matrix", format!("{} labels vs {} predictions", gt.len(), pred.len())));
        }
        let k = self.classes;
        for (&g, &p) in gt.iter().zip(pred) {
            if Some(g) == ignore {
                continue;
            }
            for v in [g, p] {
                if v as usize >= k {
                    return Err(Error::Label { label: v, classes: k });
                }
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion matrix", format!("{} vs {} classes", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self, ignore: Option<u32>) -> Result<MetricsReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::config("confusion matrix is empty"));
        }
        let k = self.classes;
        let trace: u64 = (0..k).map(|c| self.get(c, c)).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let support: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let predicted: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let (fn_, fp) = (support - tp, predicted - tp);
            let evaluated = Some(c as u32) != ignore && tp + fp + fn_ > 0;
            per_class.push(ClassMetrics {
                class: c,
                iou: evaluated.then(|| ratio(tp, tp + fp + fn_)),
                f1: evaluated.then(|| ratio(2 * tp, 2 * tp + fp + fn_)),
                precision: evaluated.then(|| ratio(tp, predicted)),
                recall: evaluated.then(|| ratio(tp, support)),
                support,
                predicted,
            });
        }
        let mean = |f: fn(&ClassMetrics) -> Option<f64>| {
            let vals: Vec<f64> = per_class.iter().filter_map(f).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let (mp, mr) = (mean(|m| m.precision), mean(|m| m.recall));
        let oa = trace as f64 / total as f64;
        Ok(MetricsReport {
            oa,
            miou: mean(|m| m.iou),
            mf1: mean(|m| m.f1),
            macro_precision: mp,
            macro_recall: mr,
            f1_of_macro: if mp + mr > 0.0 { 2.0 * mp * mr / (mp + mr) } else { 0.0 },
            oa_over_classes: oa / k as f64,
            evaluated_classes: per_class.iter().filter(|m| m.iou.is_some()).count(),
            pixels: total,
            per_class,
            confusion: self.rows(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// `None` when the class is excluded from the means.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Ground-truth pixels.
    pub support: u64,
    /// Predicted pixels.
    pub predicted: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `trace / total`.
    pub oa: f64,
    pub miou: f64,
    /// Mean of per-class F1.
    pub mf1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Harmonic mean of macro precision and macro recall.
    pub f1_of_macro: f64,
    /// `trace / (classes * total)`, the class-summed denominator variant of OA.
    pub oa_over_classes: f64,
    pub evaluated_classes: usize,
    pub pixels: u64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
}
