//! Segmentation metrics, cost accounting and latency measurement.

pub mod cost;
pub mod metrics;

use std::fmt::Write as _;

pub use cost::{bench_latency, branch_block_cost, count_cost, fused_block_cost, Cost, CostBreakdown, LatencyStats};
pub use metrics::{macc_miou, ConfusionMatrix, SegmentationScores};

use crate::data::{LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::model::train::{argmax_labels, Batch};
use crate::model::Model;

/// Stated at the top of every cost report.
pub const FLOP_CONVENTION: &str = "FLOPs count 2 per multiply-accumulate (bias adds and inference batch norm included, activations excluded)";

/// Parameters, FLOPs and optional wall-clock statistics of one model form.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub latency: Option<LatencyStats>,
}

/// Predictions for every sample, in order, computed `batch` samples at a time.
pub fn predict_samples(model: &Model, samples: &[SamplePair], batch: usize) -> Result<Vec<LabelMap>> {
    let model = model.detached();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let (rgb, thm) = Batch::inputs(chunk, model.config.dtype)?;
        out.extend(argmax_labels(&model.forward(&rgb, &thm, false)?.probs)?);
    }
    Ok(out)
}

/// Confusion matrix of the model's predictions over `samples`.
pub fn evaluate(model: &Model, samples: &[SamplePair]) -> Result<(ConfusionMatrix, Vec<LabelMap>)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate: empty dataset"));
    }
    let preds = predict_samples(model, samples, 4)?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (s, p) in samples.iter().zip(&preds) {
        s.check_classes(model.config.num_classes)?;
        cm.accumulate(&s.gt, p)?;
    }
    Ok((cm, preds))
}

/// CSV with one row per class and a final mean row.
pub fn scores_csv(scores: &SegmentationScores) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut out = String::from("class,acc,iou\n");
    for (c, (a, i)) in scores.acc.iter().zip(&scores.iou).enumerate() {
        let _ = writeln!(out, "{c},{},{}", fmt(*a), fmt(*i));
    }
    let _ = writeln!(out, "mean,{:.6},{:.6}", scores.macc, scores.miou);
    out
}

/// Aligned table for the terminal.
pub fn scores_table(scores: &SegmentationScores) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut out = format!("{:>6} {:>8} {:>8}\n", "class", "Acc", "IoU");
    for (c, (a, i)) in scores.acc.iter().zip(&scores.iou).enumerate() {
        let _ = writeln!(out, "{c:>6} {:>8} {:>8}", fmt(*a), fmt(*i));
    }
    let _ = writeln!(out, "{:>6} {:>8.2} {:>8.2}", "mean", 100.0 * scores.macc, 100.0 * scores.miou);
    if !scores.excluded.is_empty() {
        let _ = writeln!(out, "excluded from means: {:?}", scores.excluded);
    }
    out
}
