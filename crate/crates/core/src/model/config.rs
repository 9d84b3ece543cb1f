use crate::error::{Error, Result};
use crate::tensor::DType;

/// Channel widths and residual block counts of one encoder branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
}

/// Which confidence score scales a modality's fused term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateWiring {
    /// F̂_rgb is gated by p̂_thm and F̂_thm by p̂_rgb.
    #[default]
    Counterpart,
    /// Each modality is gated by its own confidence.
    Own,
}

/// Whether the confidence gates are live or held at zero (ablation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    Frozen,
}

/// Normalization of the decoder logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Sigmoid,
    Softmax,
}

/// Architecture of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub rgb: BranchSpec,
    pub thm: BranchSpec,
    /// C̃_s: channels after recalibration, per stage.
    pub reduced: [usize; 4],
    /// C̃: channels inside the cross-modality fusion.
    pub inner: usize,
    /// K: spatial kernel of the multi-branch block.
    pub kernel: usize,
    /// Kernel of the 1D channel convolution in recalibration.
    pub recal_kernel: usize,
    pub decoder_width: usize,
    pub num_classes: usize,
    pub wiring: GateWiring,
    pub gates: GateMode,
    pub activation: Activation,
    pub dtype: DType,
}

impl Default for ModelConfig {
    /// Full-width layout: ResNet-101-like widths for RGB, ResNet-34-like for
    /// thermal, C̃_s = {64,128,256,256}, C̃ = 64, K = 5, nine classes.
    fn default() -> Self {
        ModelConfig {
            rgb: BranchSpec {
                widths: [256, 512, 1024, 2048],
                blocks: [2, 2, 2, 2],
            },
            thm: BranchSpec {
                widths: [64, 128, 256, 512],
                blocks: [2, 2, 2, 2],
            },
            reduced: [64, 128, 256, 256],
            inner: 64,
            kernel: 5,
            recal_kernel: 3,
            decoder_width: 64,
            num_classes: 9,
            wiring: GateWiring::Counterpart,
            gates: GateMode::Learned,
            activation: Activation::Sigmoid,
            dtype: DType::F32,
        }
    }
}

impl ModelConfig {
    /// A desk-scale network that trains on 64×64 scenes in seconds.
    pub fn toy() -> Self {
        ModelConfig {
            rgb: BranchSpec {
                widths: [16, 32, 64, 64],
                blocks: [2, 2, 2, 2],
            },
            thm: BranchSpec {
                widths: [8, 16, 32, 32],
                blocks: [2, 2, 2, 2],
            },
            reduced: [8, 16, 16, 16],
            inner: 8,
            kernel: 5,
            recal_kernel: 3,
            decoder_width: 16,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        for (name, spec) in [("rgb", &self.rgb), ("thm", &self.thm)] {
            if spec.widths.contains(&0) {
                return bad(&format!("{name}_widths"), "widths must be positive".into());
            }
            if spec.blocks.contains(&0) {
                return bad(&format!("{name}_blocks"), "every stage needs at least one block".into());
            }
        }
        if self.reduced.contains(&0) {
            return bad("reduced", "widths must be positive".into());
        }
        if self.inner == 0 {
            return bad("inner", "must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad("kernel", format!("must be odd, got {}", self.kernel));
        }
        if self.recal_kernel % 2 == 0 {
            return bad("recal_kernel", format!("must be odd, got {}", self.recal_kernel));
        }
        if self.decoder_width == 0 {
            return bad("decoder_width", "must be positive".into());
        }
        if !(2..=256).contains(&self.num_classes) {
            return bad("num_classes", format!("must be in [2, 256], got {}", self.num_classes));
        }
        Ok(())
    }

    /// Hidden width of a confidence head fed by `c4` channels.
    pub fn head_hidden(c4: usize) -> usize {
        (c4 / 4).max(1)
    }
}
