//! Per-class accuracy and IoU from a confusion matrix, with and without the
//! unlabeled class.
//!
//! cargo run --example segmentation_metrics

use rsfnet::data::LabelMap;
use rsfnet::eval::{macc_miou, ConfusionMatrix};

fn main() -> rsfnet::Result<()> {
    let gt = LabelMap::new(3, 4, vec![0, 0, 1, 1, 0, 2, 1, 1, 2, 2, 2, 1])?;
    let pred = LabelMap::new(3, 4, vec![0, 1, 1, 1, 0, 2, 2, 1, 2, 2, 0, 1])?;
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&gt, &pred)?;

    for c in 0..3 {
        let row: Vec<u64> = (0..3).map(|p| cm.get(c, p)).collect();
        println!("gt {c}: {row:?}");
    }
    for include in [true, false] {
        let s = macc_miou(&cm, include);
        println!("include unlabeled = {include}: mAcc {:.4}, mIoU {:.4}, excluded {:?}", s.macc, s.miou, s.excluded);
        for (c, (a, i)) in s.acc.iter().zip(&s.iou).enumerate() {
            println!("  class {c}: acc {a:?}, iou {i:?}");
        }
    }
    Ok(())
}
