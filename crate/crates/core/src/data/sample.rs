use super::LabelMap;
use crate::error::{Error, Result};
use crate::plg::PseudoLabelPair;
use crate::tensor::Tensor;

/// One registered RGB/thermal pair with its ground truth.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    /// [3, H, W] with values in [0, 1].
    pub rgb: Tensor,
    /// [1, H, W] with values in [0, 1].
    pub thm: Tensor,
    pub gt: LabelMap,
    pub pseudo: Option<PseudoLabelPair>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, rgb: Tensor, thm: Tensor, gt: LabelMap, pseudo: Option<PseudoLabelPair>) -> Result<Self> {
        let id = id.into();
        let (h, w) = (gt.height(), gt.width());
        if rgb.shape() != [3, h, w] || thm.shape() != [1, h, w] {
            return Err(Error::Sample {
                id,
                msg: format!(
                    "extent mismatch: rgb {:?}, thm {:?}, labels [{h}, {w}]",
                    rgb.shape(),
                    thm.shape()
                ),
            });
        }
        for (name, t) in [("rgb", &rgb), ("thm", &thm)] {
            if t.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Sample {
                    id,
                    msg: format!("{name} values must lie in [0, 1]"),
                });
            }
        }
        Ok(SamplePair { id, rgb, thm, gt, pseudo })
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    /// Rejects label indices ≥ `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        let max = self.gt.max_class() as usize;
        if max >= num_classes {
            return Err(Error::Sample {
                id: self.id.clone(),
                msg: format!("label {max} outside [0, {num_classes})"),
            });
        }
        Ok(())
    }
}
