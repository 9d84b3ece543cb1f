use rand::Rng;

use super::config::GateWiring;
use crate::error::{Error, Result};
use crate::reparam::{branch_forward, fuse_branch_block, BranchBlockParams};
use crate::tensor::layers::join;
use crate::tensor::ops::{
    add, batch_norm, concat_channels, conv1d_channel, conv2d, global_avg_pool, mul, per_sample_gate, relu, reshape,
    sigmoid,
};
use crate::tensor::{BatchNormParams, ConvParams, DType, Parameters, Role, Tensor};

/// Channel attention from a 1D convolution over pooled channel statistics,
/// followed by a 1×1 reduction to C̃_s channels.
#[derive(Clone, Debug)]
pub struct Recalibration {
    pub kernel: Tensor,
    pub reduce: ConvParams,
}

impl Recalibration {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, dtype: DType, rng: &mut R) -> Self {
        Recalibration {
            kernel: Tensor::randn(&[k], 0.1, dtype, rng).tracked(),
            reduce: ConvParams::kaiming(c_out, c_in, (1, 1), (1, 1), (0, 0), true, dtype, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.reduce.c_out()
    }
}

impl Parameters for Recalibration {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&join(prefix, "kernel"), &self.kernel, Role::Param);
        self.reduce.visit(&join(prefix, "reduce"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(&join(prefix, "kernel"), &mut self.kernel, Role::Param);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
    }
}

/// Channel weights W̃ = σ(conv1d(GAP(F))) with shape [N, C].
pub fn channel_weights(f: &Tensor, p: &Recalibration) -> Result<Tensor> {
    Ok(sigmoid(&conv1d_channel(&global_avg_pool(f)?, &p.kernel)?))
}

/// F̃ = conv1×1(W̃ ⊗ F).
pub fn feature_recalibration(f: &Tensor, p: &Recalibration) -> Result<Tensor> {
    let (n, c, _, _) = f.dims4("feature_recalibration")?;
    if c != p.reduce.c_in() {
        return Err(Error::shape(
            "feature_recalibration",
            format!("input has {c} channels, recalibration expects {}", p.reduce.c_in()),
        ));
    }
    let w = reshape(&channel_weights(f, p)?, &[n, c, 1, 1])?;
    conv2d(&mul(f, &w)?, &p.reduce)
}

/// The K×K spatial block, either in its training-time multi-branch form or
/// collapsed into a single convolution.
#[derive(Clone, Debug)]
pub enum SpatialBlock {
    Branches(BranchBlockParams),
    Fused(ConvParams),
}

impl SpatialBlock {
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            SpatialBlock::Branches(b) => branch_forward(x, b, training),
            SpatialBlock::Fused(c) => conv2d(x, c),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, SpatialBlock::Fused(_))
    }

    pub fn fused(&self) -> Result<SpatialBlock> {
        Ok(match self {
            SpatialBlock::Branches(b) => SpatialBlock::Fused(fuse_branch_block(b)?),
            SpatialBlock::Fused(c) => SpatialBlock::Fused(c.clone()),
        })
    }
}

impl Parameters for SpatialBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        match self {
            SpatialBlock::Branches(b) => b.visit(prefix, f),
            SpatialBlock::Fused(c) => c.visit(&join(prefix, "fused"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        match self {
            SpatialBlock::Branches(b) => b.visit_mut(prefix, f),
            SpatialBlock::Fused(c) => c.visit_mut(&join(prefix, "fused"), f),
        }
    }
}

/// Per-modality half of a fusion stage.
#[derive(Clone, Debug)]
pub struct RsfBranch {
    /// 1×1 conv C̃_s → C̃, then BN and ReLU, giving Z.
    pub reduce: ConvParams,
    pub bn: BatchNormParams,
    /// Spatial block run on this modality's Z; its sigmoid weights the counterpart.
    pub block: SpatialBlock,
    /// 1×1 conv 2C̃ → C̃_s, giving Ẑ.
    pub expand: ConvParams,
}

impl RsfBranch {
    pub fn init<R: Rng + ?Sized>(c_s: usize, inner: usize, k: usize, dtype: DType, rng: &mut R) -> Result<Self> {
        Ok(RsfBranch {
            reduce: ConvParams::kaiming(inner, c_s, (1, 1), (1, 1), (0, 0), false, dtype, rng),
            bn: BatchNormParams::init(inner, dtype),
            block: SpatialBlock::Branches(BranchBlockParams::init(inner, k, dtype, rng)?),
            expand: ConvParams::kaiming(c_s, 2 * inner, (1, 1), (1, 1), (0, 0), true, dtype, rng),
        })
    }
}

impl Parameters for RsfBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.block.visit(&join(prefix, "block"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.block.visit_mut(&join(prefix, "block"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }
}

/// Cross-modality fusion parameters for one stage.
#[derive(Clone, Debug)]
pub struct RsfParams {
    pub rgb: RsfBranch,
    pub thm: RsfBranch,
}

impl RsfParams {
    pub fn init<R: Rng + ?Sized>(c_s: usize, inner: usize, k: usize, dtype: DType, rng: &mut R) -> Result<Self> {
        Ok(RsfParams {
            rgb: RsfBranch::init(c_s, inner, k, dtype, rng)?,
            thm: RsfBranch::init(c_s, inner, k, dtype, rng)?,
        })
    }

    pub fn fused(&self) -> Result<RsfParams> {
        let mut out = self.clone();
        out.rgb.block = self.rgb.block.fused()?;
        out.thm.block = self.thm.block.fused()?;
        Ok(out)
    }
}

impl Parameters for RsfParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.thm.visit(&join(prefix, "thm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
        self.thm.visit_mut(&join(prefix, "thm"), f);
    }
}

/// Per-sample confidence scores, each [N] or [N,1] with values in [0,1].
#[derive(Clone, Debug)]
pub struct ConfidencePair {
    pub p_hat_rgb: Tensor,
    pub p_hat_thm: Tensor,
}

impl ConfidencePair {
    /// The same constant scores for every one of `n` samples.
    pub fn constant(n: usize, p_rgb: f64, p_thm: f64, dtype: DType) -> Self {
        ConfidencePair {
            p_hat_rgb: Tensor::full(&[n, 1], p_rgb, dtype),
            p_hat_thm: Tensor::full(&[n, 1], p_thm, dtype),
        }
    }
}

fn gated_residual(base: &Tensor, gate: &Tensor, fused: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
    // a closed gate adds nothing, so skip the arithmetic and keep the input bits
    if !gate.is_tracked() && gate.values().iter().all(|&g| g == 0.0) {
        return Ok(base.clone());
    }
    add(base, &mul(&per_sample_gate(gate)?, &fused()?)?)
}

/// Z = relu(bn(conv1×1(F̃))).
fn squeeze(f: &Tensor, b: &RsfBranch, training: bool) -> Result<Tensor> {
    Ok(relu(&batch_norm(&conv2d(f, &b.reduce)?, &b.bn, training)?))
}

/// Ẑ_m = conv1×1([Z_m ⊗ σ(block_m′(Z_m′)); Z_m]).
fn cross(z: &Tensor, z_other: &Tensor, other: &RsfBranch, own: &RsfBranch, training: bool) -> Result<Tensor> {
    let weight = sigmoid(&other.block.forward(z_other, training)?);
    let zt = mul(z, &weight)?;
    conv2d(&concat_channels(&[&zt, z])?, &own.expand)
}

/// Enhanced features F̂_m = F̃_m + p̂·Ẑ_m for both modalities.
pub fn rsf_forward(
    f_rgb: &Tensor,
    f_thm: &Tensor,
    conf: &ConfidencePair,
    params: &RsfParams,
    wiring: GateWiring,
    training: bool,
) -> Result<(Tensor, Tensor)> {
    let (n, c, _, _) = f_rgb.dims4("rsf_forward")?;
    if f_thm.shape() != f_rgb.shape() {
        return Err(Error::shape(
            "rsf_forward",
            format!("rgb {:?} vs thm {:?}", f_rgb.shape(), f_thm.shape()),
        ));
    }
    if c != params.rgb.reduce.c_in() || c != params.thm.reduce.c_in() {
        return Err(Error::shape(
            "rsf_forward",
            format!("features have {c} channels, fusion expects {}", params.rgb.reduce.c_in()),
        ));
    }
    for p in [&conf.p_hat_rgb, &conf.p_hat_thm] {
        if p.numel() != n {
            return Err(Error::shape("rsf_forward", format!("{} confidences for {n} samples", p.numel())));
        }
    }
    let (gate_rgb, gate_thm) = match wiring {
        GateWiring::Counterpart => (&conf.p_hat_thm, &conf.p_hat_rgb),
        GateWiring::Own => (&conf.p_hat_rgb, &conf.p_hat_thm),
    };

    let mut z = None;
    let mut squeezed = || -> Result<(Tensor, Tensor)> {
        if z.is_none() {
            z = Some((squeeze(f_rgb, &params.rgb, training)?, squeeze(f_thm, &params.thm, training)?));
        }
        Ok(z.clone().expect("just set"))
    };
    let out_rgb = gated_residual(f_rgb, gate_rgb, || {
        let (zr, zt) = squeezed()?;
        cross(&zr, &zt, &params.thm, &params.rgb, training)
    })?;
    let out_thm = gated_residual(f_thm, gate_thm, || {
        let (zr, zt) = squeezed()?;
        cross(&zt, &zr, &params.rgb, &params.thm, training)
    })?;
    Ok((out_rgb, out_thm))
}
