use rand::Rng;

use super::config::{BranchSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::reparam::ConvBn;
use crate::tensor::layers::join;
use crate::tensor::ops::{add, batch_norm, conv2d, relu};
use crate::tensor::{BatchNormParams, ConvParams, DType, Parameters, Role, Tensor};

/// Input extents must be multiples of this.
pub const STRIDE: usize = 32;

fn conv_bn<R: Rng + ?Sized>(c_out: usize, c_in: usize, kernel: usize, stride: usize, dtype: DType, rng: &mut R) -> ConvBn {
    ConvBn {
        conv: ConvParams::kaiming(c_out, c_in, (kernel, kernel), (stride, stride), (kernel / 2, kernel / 2), false, dtype, rng),
        bn: BatchNormParams::init(c_out, dtype),
    }
}

fn apply(x: &Tensor, cb: &ConvBn, training: bool) -> Result<Tensor> {
    batch_norm(&conv2d(x, &cb.conv)?, &cb.bn, training)
}

/// relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)).
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvBn,
    pub second: ConvBn,
    /// Strided 1×1 projection when extents or widths change.
    pub projection: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, dtype: DType, rng: &mut R) -> Self {
        let projection = (stride != 1 || c_in != c_out).then(|| conv_bn(c_out, c_in, 1, stride, dtype, rng));
        ResidualBlock {
            first: conv_bn(c_out, c_in, 3, stride, dtype, rng),
            second: conv_bn(c_out, c_out, 3, 1, dtype, rng),
            projection,
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let h = relu(&apply(x, &self.first, training)?);
        let h = apply(&h, &self.second, training)?;
        let skip = match &self.projection {
            Some(p) => apply(x, p, training)?,
            None => x.clone(),
        };
        Ok(relu(&add(&h, &skip)?))
    }
}

impl Parameters for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
        if let Some(p) = &self.projection {
            p.visit(&join(prefix, "projection"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(&join(prefix, "projection"), f);
        }
    }
}

/// One modality's backbone: a two-convolution stem reaching 1/4 resolution,
/// then four stages of residual blocks, each after the first halving extents.
#[derive(Clone, Debug)]
pub struct EncoderBranch {
    pub stem: [ConvBn; 2],
    pub stages: Vec<Vec<ResidualBlock>>,
}

impl EncoderBranch {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, spec: &BranchSpec, dtype: DType, rng: &mut R) -> Self {
        let w0 = spec.widths[0];
        let stem = [conv_bn(w0, in_channels, 3, 2, dtype, rng), conv_bn(w0, w0, 3, 2, dtype, rng)];
        let mut stages = Vec::with_capacity(4);
        let mut c_in = w0;
        for s in 0..4 {
            let c = spec.widths[s];
            let blocks = (0..spec.blocks[s])
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let block = ResidualBlock::init(c_in, c, stride, dtype, rng);
                    c_in = c;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        EncoderBranch { stem, stages }
    }

    /// Stage outputs F_1..F_4.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Vec<Tensor>> {
        let mut h = relu(&apply(x, &self.stem[0], training)?);
        h = relu(&apply(&h, &self.stem[1], training)?);
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, training)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

impl Parameters for EncoderBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        for (i, cb) in self.stem.iter().enumerate() {
            cb.visit(&join(prefix, &format!("stem{i}")), f);
        }
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.block{b}", s + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        for (i, cb) in self.stem.iter_mut().enumerate() {
            cb.visit_mut(&join(prefix, &format!("stem{i}")), f);
        }
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.block{b}", s + 1)), f);
            }
        }
    }
}

/// Feature maps of both modalities at one stage, batched as [N, C, H, W].
#[derive(Clone, Debug)]
pub struct StageFeatures {
    /// Stage index, 1 through 4.
    pub s: usize,
    pub f_rgb: Tensor,
    pub f_thm: Tensor,
}

/// Asymmetric dual encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub rgb: EncoderBranch,
    pub thm: EncoderBranch,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Encoder {
            rgb: EncoderBranch::init(3, &cfg.rgb, cfg.dtype, rng),
            thm: EncoderBranch::init(1, &cfg.thm, cfg.dtype, rng),
        }
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.thm.visit(&join(prefix, "thm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
        self.thm.visit_mut(&join(prefix, "thm"), f);
    }
}

/// Checks [N,3,H,W] / [N,1,H,W] inputs with matching extents divisible by 32.
pub fn check_inputs(rgb: &Tensor, thm: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = rgb.dims4("encoder_forward")?;
    let (n2, c2, h2, w2) = thm.dims4("encoder_forward")?;
    if c != 3 || c2 != 1 || (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape(
            "encoder_forward",
            format!("rgb {:?} and thm {:?} must be [N,3,H,W] and [N,1,H,W]", rgb.shape(), thm.shape()),
        ));
    }
    if h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::shape(
            "encoder_forward",
            format!("height {h} and width {w} must be multiples of {STRIDE}"),
        ));
    }
    Ok((n, h, w))
}

/// Runs both branches and pairs their outputs per stage.
pub fn encoder_forward(rgb: &Tensor, thm: &Tensor, enc: &Encoder, training: bool) -> Result<Vec<StageFeatures>> {
    check_inputs(rgb, thm)?;
    let fr = enc.rgb.forward(rgb, training)?;
    let ft = enc.thm.forward(thm, training)?;
    Ok(fr
        .into_iter()
        .zip(ft)
        .enumerate()
        .map(|(i, (f_rgb, f_thm))| StageFeatures { s: i + 1, f_rgb, f_thm })
        .collect())
}
