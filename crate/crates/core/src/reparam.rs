//! Structural re-parameterization of the multi-branch K×K fusion block.
//!
//! During training the block runs four parallel branches on the same input:
//!
//! ```text
//!   main      K×K conv            → BN
//!   pointwise 1×1 conv            → BN
//!   horiz     1×1 conv → 1×K conv → BN
//!   vert      1×1 conv → K×1 conv → BN
//! ```
//!
//! and sums them. Every step is linear in the input once BN uses running
//! statistics, so the block collapses into one K×K convolution with bias:
//! fold each BN into its conv, merge each 1×1 → 1×K (K×1) pair into a single
//! kernel by contracting channels, zero-pad every kernel to K×K, then add
//! kernels and biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::layers::join;
use crate::tensor::ops::{add, batch_norm, conv2d};
use crate::tensor::{BatchNormParams, ConvParams, DType, Parameters, Role, Tensor};

/// A convolution followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

/// A 1×1 convolution feeding a 1×K or K×1 convolution, then batch normalization.
#[derive(Clone, Debug)]
pub struct SeqBranch {
    pub pointwise: ConvParams,
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

/// Training-time form of the K×K spatial block: four branches over C̃ channels.
#[derive(Clone, Debug)]
pub struct BranchBlockParams {
    pub main: ConvBn,
    pub pointwise: ConvBn,
    pub horiz: SeqBranch,
    pub vert: SeqBranch,
    pub kernel: usize,
}

fn expect_conv(
    what: &str,
    conv: &ConvParams,
    c: usize,
    kernel: (usize, usize),
    padding: (usize, usize),
) -> Result<()> {
    if conv.c_out() != c || conv.c_in() != c {
        return Err(Error::shape(
            "BranchBlockParams",
            format!("{what}: expected {c}→{c} channels, got {}→{}", conv.c_in(), conv.c_out()),
        ));
    }
    if conv.kernel() != kernel {
        return Err(Error::shape(
            "BranchBlockParams",
            format!("{what}: expected kernel {kernel:?}, got {:?}", conv.kernel()),
        ));
    }
    if conv.stride != (1, 1) {
        return Err(Error::invalid(format!("BranchBlockParams: {what}: stride must be 1")));
    }
    if conv.padding != padding {
        return Err(Error::invalid(format!(
            "BranchBlockParams: {what}: padding must be {padding:?} to preserve extents, got {:?}",
            conv.padding
        )));
    }
    Ok(())
}

fn expect_bn(what: &str, bn: &BatchNormParams, c: usize) -> Result<()> {
    if bn.channels() != c {
        return Err(Error::shape(
            "BranchBlockParams",
            format!("{what}: normalization has {} channels, expected {c}", bn.channels()),
        ));
    }
    Ok(())
}

impl BranchBlockParams {
    /// Assembles a block after checking that all branches map C̃ → C̃ at stride
    /// 1 with extent-preserving padding, and that K is odd.
    pub fn new(main: ConvBn, pointwise: ConvBn, horiz: SeqBranch, vert: SeqBranch, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("BranchBlockParams: kernel size {kernel} must be odd")));
        }
        let c = main.conv.c_out();
        let r = kernel / 2;
        expect_conv("main", &main.conv, c, (kernel, kernel), (r, r))?;
        expect_bn("main", &main.bn, c)?;
        expect_conv("pointwise", &pointwise.conv, c, (1, 1), (0, 0))?;
        expect_bn("pointwise", &pointwise.bn, c)?;
        expect_conv("horiz.pointwise", &horiz.pointwise, c, (1, 1), (0, 0))?;
        expect_conv("horiz", &horiz.conv, c, (1, kernel), (0, r))?;
        expect_bn("horiz", &horiz.bn, c)?;
        expect_conv("vert.pointwise", &vert.pointwise, c, (1, 1), (0, 0))?;
        expect_conv("vert", &vert.conv, c, (kernel, 1), (r, 0))?;
        expect_bn("vert", &vert.bn, c)?;
        Ok(BranchBlockParams {
            main,
            pointwise,
            horiz,
            vert,
            kernel,
        })
    }

    /// Trainable block with He-initialised, bias-free convolutions and fresh BN.
    pub fn init<R: Rng + ?Sized>(c: usize, kernel: usize, dtype: DType, rng: &mut R) -> Result<Self> {
        let r = kernel / 2;
        let conv = |rng: &mut R, k: (usize, usize), p: (usize, usize)| {
            ConvParams::kaiming(c, c, k, (1, 1), p, false, dtype, rng)
        };
        let main = ConvBn {
            conv: conv(rng, (kernel, kernel), (r, r)),
            bn: BatchNormParams::init(c, dtype),
        };
        let pointwise = ConvBn {
            conv: conv(rng, (1, 1), (0, 0)),
            bn: BatchNormParams::init(c, dtype),
        };
        let horiz = SeqBranch {
            pointwise: conv(rng, (1, 1), (0, 0)),
            conv: conv(rng, (1, kernel), (0, r)),
            bn: BatchNormParams::init(c, dtype),
        };
        let vert = SeqBranch {
            pointwise: conv(rng, (1, 1), (0, 0)),
            conv: conv(rng, (kernel, 1), (r, 0)),
            bn: BatchNormParams::init(c, dtype),
        };
        BranchBlockParams::new(main, pointwise, horiz, vert, kernel)
    }

    /// Block with random weights, biases and normalization statistics, as
    /// left behind by training. Used for equivalence fuzzing.
    pub fn randomized<R: Rng + ?Sized>(c: usize, kernel: usize, dtype: DType, rng: &mut R) -> Result<Self> {
        let r = kernel / 2;
        let conv = |rng: &mut R, k: (usize, usize), p: (usize, usize), bias: bool| {
            let fan_in = (c * k.0 * k.1) as f64;
            let w = Tensor::randn(&[c, c, k.0, k.1], 1.0 / fan_in.sqrt(), dtype, rng);
            let b = bias.then(|| Tensor::randn(&[c], 0.1, dtype, rng));
            ConvParams::new(w, b, (1, 1), p).expect("valid by construction")
        };
        let bn = |rng: &mut R| {
            BatchNormParams::new(
                Tensor::uniform(&[c], 0.5, 1.5, dtype, rng),
                Tensor::randn(&[c], 0.2, dtype, rng),
                Tensor::randn(&[c], 0.2, dtype, rng),
                Tensor::uniform(&[c], 0.5, 2.0, dtype, rng),
                1e-5,
                0.1,
            )
            .expect("valid by construction")
        };
        let main = ConvBn {
            conv: conv(rng, (kernel, kernel), (r, r), true),
            bn: bn(rng),
        };
        let pointwise = ConvBn {
            conv: conv(rng, (1, 1), (0, 0), true),
            bn: bn(rng),
        };
        let horiz = SeqBranch {
            pointwise: conv(rng, (1, 1), (0, 0), false),
            conv: conv(rng, (1, kernel), (0, r), true),
            bn: bn(rng),
        };
        let vert = SeqBranch {
            pointwise: conv(rng, (1, 1), (0, 0), false),
            conv: conv(rng, (kernel, 1), (r, 0), true),
            bn: bn(rng),
        };
        BranchBlockParams::new(main, pointwise, horiz, vert, kernel)
    }

    /// Every weight zero and every normalization the identity, so the block outputs zeros.
    pub fn zeroed(c: usize, kernel: usize, dtype: DType) -> Self {
        let r = kernel / 2;
        let conv = |k: (usize, usize), p: (usize, usize)| {
            ConvParams::new(Tensor::zeros(&[c, c, k.0, k.1], dtype), None, (1, 1), p).expect("valid")
        };
        BranchBlockParams::new(
            ConvBn {
                conv: conv((kernel, kernel), (r, r)),
                bn: BatchNormParams::identity(c, dtype),
            },
            ConvBn {
                conv: conv((1, 1), (0, 0)),
                bn: BatchNormParams::identity(c, dtype),
            },
            SeqBranch {
                pointwise: conv((1, 1), (0, 0)),
                conv: conv((1, kernel), (0, r)),
                bn: BatchNormParams::identity(c, dtype),
            },
            SeqBranch {
                pointwise: conv((1, 1), (0, 0)),
                conv: conv((kernel, 1), (r, 0)),
                bn: BatchNormParams::identity(c, dtype),
            },
            kernel,
        )
        .expect("valid by construction")
    }

    /// A block whose only active branch is `conv` (K×K, same padding) behind an identity BN.
    pub fn from_single(conv: ConvParams) -> Result<Self> {
        let (kh, kw) = conv.kernel();
        if kh != kw {
            return Err(Error::shape("from_single", format!("kernel {kh}×{kw} is not square")));
        }
        let mut block = BranchBlockParams::zeroed(conv.c_out(), kh, conv.dtype());
        block.main.conv = conv;
        BranchBlockParams::new(block.main, block.pointwise, block.horiz, block.vert, kh)
    }

    pub fn channels(&self) -> usize {
        self.main.conv.c_out()
    }

    pub fn dtype(&self) -> DType {
        self.main.conv.dtype()
    }
}

impl Parameters for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

impl Parameters for SeqBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.pointwise.visit(&join(prefix, "pointwise"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

impl Parameters for BranchBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.main.visit(&join(prefix, "main"), f);
        self.pointwise.visit(&join(prefix, "pointwise"), f);
        self.horiz.visit(&join(prefix, "horiz"), f);
        self.vert.visit(&join(prefix, "vert"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.main.visit_mut(&join(prefix, "main"), f);
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f);
        self.horiz.visit_mut(&join(prefix, "horiz"), f);
        self.vert.visit_mut(&join(prefix, "vert"), f);
    }
}

/// Sum of the four branch outputs. Spatial extents are preserved.
pub fn branch_forward(x: &Tensor, b: &BranchBlockParams, training: bool) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4("branch_forward")?;
    if c != b.channels() {
        return Err(Error::shape(
            "branch_forward",
            format!("input has {c} channels, block expects {}", b.channels()),
        ));
    }
    let main = batch_norm(&conv2d(x, &b.main.conv)?, &b.main.bn, training)?;
    let point = batch_norm(&conv2d(x, &b.pointwise.conv)?, &b.pointwise.bn, training)?;
    let horiz = batch_norm(&conv2d(&conv2d(x, &b.horiz.pointwise)?, &b.horiz.conv)?, &b.horiz.bn, training)?;
    let vert = batch_norm(&conv2d(&conv2d(x, &b.vert.pointwise)?, &b.vert.conv)?, &b.vert.bn, training)?;
    add(&add(&add(&main, &point)?, &horiz)?, &vert)
}

/// Absorbs inference-mode batch normalization into the preceding convolution:
/// W′ = W·γ/√(σ²+eps) per output channel, b′ = β + (b − μ)·γ/√(σ²+eps).
pub fn fold_bn(conv: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    let c_out = conv.c_out();
    if bn.channels() != c_out {
        return Err(Error::shape(
            "fold_bn",
            format!("normalization has {} channels, convolution outputs {c_out}", bn.channels()),
        ));
    }
    let (scale, _) = bn.inference_affine();
    let r = bn.running();
    let per_out = conv.weight.numel() / c_out;
    let weight: Vec<f64> = conv
        .weight
        .values()
        .iter()
        .enumerate()
        .map(|(i, w)| w * scale[i / per_out])
        .collect();
    let bias: Vec<f64> = (0..c_out)
        .map(|o| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b.values()[o]);
            bn.beta.values()[o] + (b - r.mean.values()[o]) * scale[o]
        })
        .collect();
    let dtype = conv.dtype();
    ConvParams::new(
        Tensor::with_dtype(conv.weight.shape(), weight, dtype)?,
        Some(Tensor::with_dtype(&[c_out], bias, dtype)?),
        conv.stride,
        conv.padding,
    )
}

/// Merges a 1×1 convolution `k1` followed by `k2` into one kernel 𝒦′ with
/// 𝒦′[o,i,u,v] = Σ_m 𝒦₂[o,m,u,v]·𝒦₁[m,i] and b′ = b₂ + Σ_{m,u,v} 𝒦₂[o,m,u,v]·b₁[m].
///
/// `k1` must be unpadded and unstrided. A nonzero `k1` bias is only
/// representable when `k2` is unpadded too, since `k2`'s zero padding would
/// otherwise see zeros where the sequential form sees the bias.
pub fn merge_seq_pointwise(k1: &ConvParams, k2: &ConvParams) -> Result<ConvParams> {
    if k1.kernel() != (1, 1) {
        return Err(Error::invalid(format!(
            "merge_seq_pointwise: first kernel must be 1×1, got {:?}",
            k1.kernel()
        )));
    }
    if k1.padding != (0, 0) || k1.stride != (1, 1) {
        return Err(Error::invalid(
            "merge_seq_pointwise: first convolution must have no padding and stride 1",
        ));
    }
    if k2.c_in() != k1.c_out() {
        return Err(Error::shape(
            "merge_seq_pointwise",
            format!("second kernel reads {} channels, first writes {}", k2.c_in(), k1.c_out()),
        ));
    }
    let b1_nonzero = k1.bias.as_ref().is_some_and(|b| b.values().iter().any(|&v| v != 0.0));
    if b1_nonzero && k2.padding != (0, 0) {
        return Err(Error::invalid(
            "merge_seq_pointwise: first-kernel bias cannot be merged through a zero-padded second kernel",
        ));
    }

    let (c_out, mid, kh, kw) = k2.weight.dims4("merge_seq_pointwise")?;
    let c_in = k1.c_in();
    let a = k1.weight.values(); // [mid, c_in]
    let w2 = k2.weight.values();
    let taps = kh * kw;
    let mut merged = vec![0.0; c_out * c_in * taps];
    for o in 0..c_out {
        for m in 0..mid {
            let w2_om = &w2[(o * mid + m) * taps..][..taps];
            for i in 0..c_in {
                let s = a[m * c_in + i];
                let dst = &mut merged[(o * c_in + i) * taps..][..taps];
                dst.iter_mut().zip(w2_om).for_each(|(d, w)| *d += w * s);
            }
        }
    }

    let has_bias = k1.bias.is_some() || k2.bias.is_some();
    let bias = has_bias.then(|| {
        (0..c_out)
            .map(|o| {
                let b2 = k2.bias.as_ref().map_or(0.0, |b| b.values()[o]);
                let through = k1.bias.as_ref().map_or(0.0, |b1| {
                    (0..mid)
                        .map(|m| b1.values()[m] * w2[(o * mid + m) * taps..][..taps].iter().sum::<f64>())
                        .sum()
                });
                b2 + through
            })
            .collect::<Vec<f64>>()
    });
    let dtype = k2.dtype().promote(k1.dtype());
    ConvParams::new(
        Tensor::with_dtype(&[c_out, c_in, kh, kw], merged, dtype)?,
        bias.map(|b| Tensor::with_dtype(&[c_out], b, dtype)).transpose()?,
        k2.stride,
        k2.padding,
    )
}

/// Embeds a stride-1 kernel with "same" padding at the center of a K×K
/// kernel, so that forward results with "same" padding are unchanged.
pub fn zero_pad_kernel(k: &ConvParams, size: usize) -> Result<ConvParams> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("zero_pad_kernel: target size {size} must be odd")));
    }
    let (c_out, c_in, kh, kw) = k.weight.dims4("zero_pad_kernel")?;
    if kh > size || kw > size {
        return Err(Error::invalid(format!(
            "zero_pad_kernel: kernel {kh}×{kw} larger than {size}×{size}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!("zero_pad_kernel: kernel {kh}×{kw} has an even extent")));
    }
    if k.stride != (1, 1) || k.padding != (kh / 2, kw / 2) {
        return Err(Error::invalid(
            "zero_pad_kernel: kernel must be stride 1 with same padding",
        ));
    }
    let (oy, ox) = ((size - kh) / 2, (size - kw) / 2);
    let src = k.weight.values();
    let mut out = vec![0.0; c_out * c_in * size * size];
    for plane in 0..c_out * c_in {
        for y in 0..kh {
            for x in 0..kw {
                out[(plane * size + y + oy) * size + x + ox] = src[(plane * kh + y) * kw + x];
            }
        }
    }
    ConvParams::new(
        Tensor::with_dtype(&[c_out, c_in, size, size], out, k.dtype())?,
        k.bias.clone(),
        (1, 1),
        (size / 2, size / 2),
    )
}

fn add_convs(a: &ConvParams, b: &ConvParams) -> Result<ConvParams> {
    if a.weight.shape() != b.weight.shape() || a.padding != b.padding {
        return Err(Error::shape(
            "fuse_branch_block",
            format!("cannot sum kernels {:?} and {:?}", a.weight.shape(), b.weight.shape()),
        ));
    }
    let w: Vec<f64> = a.weight.values().iter().zip(b.weight.values()).map(|(x, y)| x + y).collect();
    let c = a.c_out();
    let bias = |p: &ConvParams| p.bias.as_ref().map_or_else(|| vec![0.0; c], |t| t.to_vec());
    let bsum: Vec<f64> = bias(a).iter().zip(bias(b)).map(|(x, y)| x + y).collect();
    let dtype = a.dtype();
    ConvParams::new(
        Tensor::with_dtype(a.weight.shape(), w, dtype)?,
        Some(Tensor::with_dtype(&[c], bsum, dtype)?),
        (1, 1),
        a.padding,
    )
}

/// Collapses the four-branch block into one K×K convolution with bias that
/// matches [`branch_forward`] in inference mode.
pub fn fuse_branch_block(b: &BranchBlockParams) -> Result<ConvParams> {
    let k = b.kernel;
    // every intermediate kernel stays in f64; the result is rounded once
    let wide = |c: &ConvParams| c.cast(DType::F64);
    let main = fold_bn(&wide(&b.main.conv), &b.main.bn)?;
    let point = zero_pad_kernel(&fold_bn(&wide(&b.pointwise.conv), &b.pointwise.bn)?, k)?;
    let horiz = zero_pad_kernel(
        &merge_seq_pointwise(&wide(&b.horiz.pointwise), &fold_bn(&wide(&b.horiz.conv), &b.horiz.bn)?)?,
        k,
    )?;
    let vert = zero_pad_kernel(
        &merge_seq_pointwise(&wide(&b.vert.pointwise), &fold_bn(&wide(&b.vert.conv), &b.vert.bn)?)?,
        k,
    )?;
    let mut acc = main;
    for part in [&point, &horiz, &vert] {
        acc = add_convs(&acc, part)?;
    }
    Ok(acc.cast(b.dtype()))
}

impl ConvParams {
    /// Untracked copy with values converted to `dtype`.
    pub fn cast(&self, dtype: DType) -> ConvParams {
        ConvParams {
            weight: self.weight.to_dtype(dtype),
            bias: self.bias.as_ref().map(|b| b.to_dtype(dtype)),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Outcome of comparing a fused convolution with its multi-branch source.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs both forms on `trials` random inputs (inference mode) and records
/// the largest absolute output deviation.
pub fn verify_equivalence(
    b: &BranchBlockParams,
    fused: &ConvParams,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = b.channels();
    let extent = 2 * b.kernel + 1;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let h = extent + rng.random_range(0..4);
        let w = extent + rng.random_range(0..4);
        let x = Tensor::randn(&[2, c, h, w], 1.0, b.dtype(), &mut rng);
        let reference = branch_forward(&x, b, false)?;
        let candidate = conv2d(&x, fused)?;
        worst = worst.max(reference.max_abs_diff(&candidate)?);
    }
    Ok(EquivalenceReport {
        trials,
        max_abs_deviation: worst,
        tolerance: tol,
        passed: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn zero_block_outputs_zero() {
        let b = BranchBlockParams::zeroed(3, 3, DType::F64);
        let x = Tensor::randn(&[1, 3, 5, 5], 1.0, DType::F64, &mut rng(0));
        let y = branch_forward(&x, &b, false).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
        let fused = fuse_branch_block(&b).unwrap();
        assert!(fused.weight.values().iter().all(|&v| v == 0.0));
        assert!(fused.bias.unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn main_branch_only_equals_plain_conv() {
        let mut g = rng(1);
        let main = ConvParams::new(Tensor::randn(&[2, 2, 3, 3], 0.5, DType::F64, &mut g), None, (1, 1), (1, 1)).unwrap();
        let b = BranchBlockParams::from_single(main.clone()).unwrap();
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, DType::F64, &mut g);
        let y = branch_forward(&x, &b, false).unwrap();
        assert!(y.bit_eq(&conv2d(&x, &main).unwrap()));
        let fused = fuse_branch_block(&b).unwrap();
        assert!(fused.weight.bit_eq(&main.weight));
    }

    #[test]
    fn branch_sum_matches_independent_branches() {
        let mut g = rng(2);
        let b = BranchBlockParams::randomized(4, 5, DType::F64, &mut g).unwrap();
        let x = Tensor::randn(&[2, 4, 7, 8], 1.0, DType::F64, &mut g);
        let y = branch_forward(&x, &b, false).unwrap();

        let run = |convs: &[&ConvParams], bn: &BatchNormParams| {
            let mut h = x.clone();
            for c in convs {
                h = conv2d(&h, c).unwrap();
            }
            batch_norm(&h, bn, false).unwrap()
        };
        let parts = [
            run(&[&b.main.conv], &b.main.bn),
            run(&[&b.pointwise.conv], &b.pointwise.bn),
            run(&[&b.horiz.pointwise, &b.horiz.conv], &b.horiz.bn),
            run(&[&b.vert.pointwise, &b.vert.conv], &b.vert.bn),
        ];
        for (i, v) in y.values().iter().enumerate() {
            let expect: f64 = parts.iter().map(|p| p.values()[i]).sum();
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_bn_identity_and_scaling() {
        let mut g = rng(3);
        let conv = ConvParams::new(Tensor::randn(&[2, 3, 3, 3], 1.0, DType::F64, &mut g), None, (1, 1), (1, 1)).unwrap();
        let folded = fold_bn(&conv, &BatchNormParams::identity(2, DType::F64)).unwrap();
        assert!(folded.weight.bit_eq(&conv.weight));
        assert!(folded.bias.unwrap().values().iter().all(|&v| v == 0.0));

        let bn = BatchNormParams::new(t(&[2], &[2.0, 2.0]), t(&[2], &[0.0, 0.0]), t(&[2], &[0.0, 0.0]), t(&[2], &[1.0, 1.0]), 0.0, 0.1).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap();
        for (a, b) in folded.weight.values().iter().zip(conv.weight.values()) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(fold_bn(&conv, &BatchNormParams::identity(3, DType::F64)).is_err());
    }

    #[test]
    fn fold_bn_forward_equivalence_f32() {
        let mut g = rng(4);
        for _ in 0..10 {
            let conv = ConvParams::new(
                Tensor::randn(&[5, 3, 3, 3], 0.3, DType::F32, &mut g),
                Some(Tensor::randn(&[5], 0.3, DType::F32, &mut g)),
                (1, 1),
                (1, 1),
            )
            .unwrap();
            let bn = BatchNormParams::new(
                Tensor::uniform(&[5], 0.5, 1.5, DType::F32, &mut g),
                Tensor::randn(&[5], 0.2, DType::F32, &mut g),
                Tensor::randn(&[5], 0.2, DType::F32, &mut g),
                Tensor::uniform(&[5], 0.5, 2.0, DType::F32, &mut g),
                1e-5,
                0.1,
            )
            .unwrap();
            let x = Tensor::randn(&[2, 3, 6, 6], 1.0, DType::F32, &mut g);
            let unfused = batch_norm(&conv2d(&x, &conv).unwrap(), &bn, false).unwrap();
            let fused = conv2d(&x, &fold_bn(&conv, &bn).unwrap()).unwrap();
            assert!(unfused.max_abs_diff(&fused).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn merge_with_identity_pointwise_returns_second_kernel() {
        let mut g = rng(5);
        let c = 3;
        let mut eye = vec![0.0; c * c];
        (0..c).for_each(|i| eye[i * c + i] = 1.0);
        let k1 = ConvParams::new(t(&[c, c, 1, 1], &eye), None, (1, 1), (0, 0)).unwrap();
        let k2 = ConvParams::new(Tensor::randn(&[c, c, 1, 5], 1.0, DType::F64, &mut g), None, (1, 1), (0, 2)).unwrap();
        let merged = merge_seq_pointwise(&k1, &k2).unwrap();
        assert!(merged.weight.bit_eq(&k2.weight));
        assert!(merged.bias.is_none());
    }

    #[test]
    fn merge_single_channel_by_hand() {
        let k1 = ConvParams::new(t(&[1, 1, 1, 1], &[2.0]), None, (1, 1), (0, 0)).unwrap();
        let k2 = ConvParams::new(t(&[1, 1, 1, 3], &[0.5, -1.0, 3.0]), None, (1, 1), (0, 1)).unwrap();
        let merged = merge_seq_pointwise(&k1, &k2).unwrap();
        assert_eq!(merged.weight.values(), &[1.0, -2.0, 6.0]);
    }

    #[test]
    fn merge_forward_equivalence_f32() {
        let mut g = rng(6);
        for _ in 0..10 {
            let k1 = ConvParams::new(Tensor::randn(&[4, 4, 1, 1], 0.5, DType::F32, &mut g), None, (1, 1), (0, 0)).unwrap();
            let k2 = ConvParams::new(
                Tensor::randn(&[4, 4, 1, 5], 0.3, DType::F32, &mut g),
                Some(Tensor::randn(&[4], 0.3, DType::F32, &mut g)),
                (1, 1),
                (0, 2),
            )
            .unwrap();
            let x = Tensor::randn(&[2, 4, 6, 9], 1.0, DType::F32, &mut g);
            let seq = conv2d(&conv2d(&x, &k1).unwrap(), &k2).unwrap();
            let merged = conv2d(&x, &merge_seq_pointwise(&k1, &k2).unwrap()).unwrap();
            assert!(seq.max_abs_diff(&merged).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn merge_propagates_first_bias_through_unpadded_kernel() {
        let mut g = rng(7);
        let k1 = ConvParams::new(
            Tensor::randn(&[3, 2, 1, 1], 1.0, DType::F64, &mut g),
            Some(Tensor::randn(&[3], 1.0, DType::F64, &mut g)),
            (1, 1),
            (0, 0),
        )
        .unwrap();
        let k2 = ConvParams::new(
            Tensor::randn(&[4, 3, 3, 1], 1.0, DType::F64, &mut g),
            Some(Tensor::randn(&[4], 1.0, DType::F64, &mut g)),
            (1, 1),
            (0, 0),
        )
        .unwrap();
        let x = Tensor::randn(&[1, 2, 6, 5], 1.0, DType::F64, &mut g);
        let seq = conv2d(&conv2d(&x, &k1).unwrap(), &k2).unwrap();
        let merged = conv2d(&x, &merge_seq_pointwise(&k1, &k2).unwrap()).unwrap();
        assert!(seq.max_abs_diff(&merged).unwrap() <= 1e-12);

        let padded = ConvParams { padding: (1, 0), ..k2 };
        assert!(merge_seq_pointwise(&k1, &padded).is_err());
    }

    #[test]
    fn merge_rejects_padded_or_strided_first_kernel() {
        let k2 = ConvParams::new(Tensor::zeros(&[1, 1, 1, 3], DType::F64), None, (1, 1), (0, 1)).unwrap();
        let padded = ConvParams::new(Tensor::zeros(&[1, 1, 1, 1], DType::F64), None, (1, 1), (1, 1)).unwrap();
        let strided = ConvParams::new(Tensor::zeros(&[1, 1, 1, 1], DType::F64), None, (2, 2), (0, 0)).unwrap();
        assert!(merge_seq_pointwise(&padded, &k2).is_err());
        assert!(merge_seq_pointwise(&strided, &k2).is_err());
    }

    #[test]
    fn zero_pad_places_taps_centered() {
        let k = ConvParams::new(t(&[1, 1, 1, 1], &[4.0]), None, (1, 1), (0, 0)).unwrap();
        let p = zero_pad_kernel(&k, 3).unwrap();
        assert_eq!(p.weight.values(), &[0.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.padding, (1, 1));

        let row = ConvParams::new(t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]), None, (1, 1), (0, 1)).unwrap();
        let p = zero_pad_kernel(&row, 3).unwrap();
        assert_eq!(p.weight.values(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);

        let big = ConvParams::new(Tensor::zeros(&[1, 1, 1, 5], DType::F64), None, (1, 1), (0, 2)).unwrap();
        assert!(zero_pad_kernel(&big, 3).is_err());
        assert!(zero_pad_kernel(&k, 4).is_err());
    }

    #[test]
    fn zero_pad_forward_equivalence() {
        let mut g = rng(8);
        let row = ConvParams::new(
            Tensor::randn(&[3, 3, 1, 5], 1.0, DType::F64, &mut g),
            Some(Tensor::randn(&[3], 1.0, DType::F64, &mut g)),
            (1, 1),
            (0, 2),
        )
        .unwrap();
        let sq = zero_pad_kernel(&row, 5).unwrap();
        let x = Tensor::randn(&[1, 3, 7, 7], 1.0, DType::F64, &mut g);
        let d = conv2d(&x, &row).unwrap().max_abs_diff(&conv2d(&x, &sq).unwrap()).unwrap();
        assert!(d <= 1e-6);
    }

    #[test]
    fn verify_equivalence_passes_and_detects_perturbation() {
        let mut g = rng(9);
        let b = BranchBlockParams::randomized(6, 3, DType::F32, &mut g).unwrap();
        let fused = fuse_branch_block(&b).unwrap();
        let report = verify_equivalence(&b, &fused, 3, 1e-5, 11).unwrap();
        assert!(report.passed, "{report:?}");

        let mut w = fused.weight.to_vec();
        w[0] += 1e-2;
        let broken = ConvParams {
            weight: Tensor::with_dtype(fused.weight.shape(), w, DType::F32).unwrap(),
            ..fused
        };
        assert!(!verify_equivalence(&b, &broken, 3, 1e-5, 11).unwrap().passed);

        let zero = BranchBlockParams::zeroed(2, 3, DType::F64);
        let report = verify_equivalence(&zero, &fuse_branch_block(&zero).unwrap(), 2, 0.0, 1).unwrap();
        assert_eq!(report.max_abs_deviation, 0.0);
    }

    #[test]
    fn fused_param_count_is_fixed() {
        let mut g = rng(10);
        for (c, k) in [(4, 3), (7, 5), (16, 7)] {
            let b = BranchBlockParams::randomized(c, k, DType::F64, &mut g).unwrap();
            let fused = fuse_branch_block(&b).unwrap();
            assert_eq!(fused.param_count(), c * c * k * k + c);
        }
    }

    #[test]
    fn refusing_is_idempotent() {
        let mut g = rng(11);
        let b = BranchBlockParams::randomized(5, 5, DType::F64, &mut g).unwrap();
        let once = fuse_branch_block(&b).unwrap();
        let twice = fuse_branch_block(&BranchBlockParams::from_single(once.clone()).unwrap()).unwrap();
        assert!(once.weight.bit_eq(&twice.weight));
        assert!(once.bias.unwrap().bit_eq(&twice.bias.unwrap()));
    }

    #[test]
    fn block_invariants_enforced() {
        let mut g = rng(12);
        assert!(BranchBlockParams::init(4, 4, DType::F64, &mut g).is_err());
        let mut b = BranchBlockParams::init(4, 3, DType::F64, &mut g).unwrap();
        b.horiz.conv.padding = (0, 0);
        assert!(BranchBlockParams::new(b.main, b.pointwise, b.horiz, b.vert, 3).is_err());
        let b = BranchBlockParams::init(4, 3, DType::F64, &mut g).unwrap();
        let x = Tensor::zeros(&[1, 3, 5, 5], DType::F64);
        assert!(branch_forward(&x, &b, false).is_err());
    }
}
