use std::ops::AddAssign;

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Pixel counts indexed by (ground truth, prediction).
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

    /// Builds a matrix from rows of counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("ConfusionMatrix", "rows must form a square grid".to_string()));
        }
        Ok(ConfusionMatrix {
            classes: c,
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

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Adds one (ground truth, prediction) pair of maps.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "ground truth {}x{} vs prediction {}x{}",
                    gt.height(),
                    gt.width(),
                    pred.height(),
                    pred.width()
                ),
            ));
        }
        let c = self.classes;
        if let Some(bad) = gt.values().iter().chain(pred.values()).find(|&&v| v as usize >= c) {
            return Err(Error::invalid(format!("accumulate: class index {bad} outside [0, {c})")));
        }
        for (&g, &p) in gt.values().iter().zip(pred.values()) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different class counts");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }
}

/// Per-class and mean accuracy / IoU.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationScores {
    /// Recall per class; `None` when the class never occurs in the ground truth.
    pub acc: Vec<Option<f64>>,
    /// IoU per class; `None` when the class occurs in neither map.
    pub iou: Vec<Option<f64>>,
    pub macc: f64,
    pub miou: f64,
    /// Classes left out of the means.
    pub excluded: Vec<usize>,
}

/// acc_c = TP/(TP+FN), iou_c = TP/(TP+FN+FP), averaged over classes with a
/// nonzero denominator. Class 0 (unlabeled) takes part unless
/// `include_unlabeled` is false.
pub fn macc_miou(cm: &ConfusionMatrix, include_unlabeled: bool) -> SegmentationScores {
    let c = cm.classes();
    let mut acc = Vec::with_capacity(c);
    let mut iou = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k) as f64;
        let row = cm.row_sum(k) as f64;
        let union = row + cm.col_sum(k) as f64 - tp;
        acc.push((row > 0.0).then(|| tp / row));
        iou.push((union > 0.0).then(|| tp / union));
    }
    let first = if include_unlabeled { 0 } else { 1 };
    let mean = |v: &[Option<f64>]| {
        let vals: Vec<f64> = v.iter().skip(first).flatten().copied().collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let excluded = (0..c).filter(|&k| k < first || (acc[k].is_none() && iou[k].is_none())).collect();
    SegmentationScores {
        macc: mean(&acc),
        miou: mean(&iou),
        acc,
        iou,
        excluded,
    }
}
