//! Saliency, Otsu masks and modality confidence targets for a few synthetic
//! day and night scenes.
//!
//! cargo run --example pseudo_labels

use rsfnet::data::{make_synthetic_dataset, SceneMode};
use rsfnet::plg::{pseudo_label_detail, PlgConfig};

fn main() -> rsfnet::Result<()> {
    let cfg = PlgConfig::default();
    for mode in [SceneMode::Day, SceneMode::Night] {
        for s in make_synthetic_dataset(3, 5, mode)? {
            let d = pseudo_label_detail(&s.rgb, &s.thm, &s.gt, &cfg)?;
            println!(
                "{mode:?} {}: foreground {:>4} px | rgb mask {:>4} px (t={:>5.1}) p_rgb {:.3} | thm mask {:>4} px (t={:>5.1}) p_thm {:.3}",
                s.id,
                d.ground_truth.count(),
                d.mask_rgb.count(),
                d.threshold_rgb,
                d.labels.p_rgb,
                d.mask_thm.count(),
                d.threshold_thm,
                d.labels.p_thm
            );
        }
    }
    Ok(())
}
