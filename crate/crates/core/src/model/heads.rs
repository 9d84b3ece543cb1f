use rand::Rng;

use super::config::{Activation, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::layers::join;
use crate::tensor::ops::{add, bilinear_resize, conv2d, global_avg_pool, linear, relu, sigmoid, softmax_channels};
use crate::tensor::{ConvParams, DType, LinearParams, Parameters, Role, Tensor};

/// p̂ = σ(fc2(relu(fc1(GAP(F_4))))).
#[derive(Clone, Debug)]
pub struct ConfidenceHead {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl ConfidenceHead {
    pub fn init<R: Rng + ?Sized>(c4: usize, dtype: DType, rng: &mut R) -> Self {
        let hidden = ModelConfig::head_hidden(c4);
        ConfidenceHead {
            fc1: LinearParams::kaiming(hidden, c4, dtype, rng),
            fc2: LinearParams::kaiming(1, hidden, dtype, rng),
        }
    }

    pub fn zeroed(c4: usize, dtype: DType) -> Self {
        let hidden = ModelConfig::head_hidden(c4);
        let zero = |o: usize, i: usize| LinearParams {
            weight: Tensor::zeros(&[o, i], dtype).tracked(),
            bias: Tensor::zeros(&[o], dtype).tracked(),
        };
        ConfidenceHead {
            fc1: zero(hidden, c4),
            fc2: zero(1, hidden),
        }
    }
}

impl Parameters for ConfidenceHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Confidence scores [N, 1], strictly inside (0, 1) for finite inputs.
pub fn confidence_head(f4: &Tensor, p: &ConfidenceHead) -> Result<Tensor> {
    let pooled = global_avg_pool(f4)?;
    Ok(sigmoid(&linear(&relu(&linear(&pooled, &p.fc1)?), &p.fc2)?))
}

/// Three 3×3 convolutions around one ×2 bilinear upsampling and a lateral skip.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub before: ConvParams,
    pub after: [ConvParams; 2],
}

impl Parameters for DecoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.before.visit(&join(prefix, "conv0"), f);
        self.after[0].visit(&join(prefix, "conv1"), f);
        self.after[1].visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.before.visit_mut(&join(prefix, "conv0"), f);
        self.after[0].visit_mut(&join(prefix, "conv1"), f);
        self.after[1].visit_mut(&join(prefix, "conv2"), f);
    }
}

/// One modality's path from stage 4 back up to 1/4 resolution.
#[derive(Clone, Debug)]
pub struct DecoderStream {
    /// 1×1 projections of the enhanced stage features to the decoder width.
    pub lateral: [ConvParams; 4],
    /// Blocks bringing stage 4 to stage 3, 3 to 2, and 2 to 1.
    pub blocks: [DecoderBlock; 3],
}

impl DecoderStream {
    fn build(reduced: &[usize; 4], d: usize, mut conv: impl FnMut(usize, usize, usize) -> ConvParams) -> Self {
        let lateral = [0, 1, 2, 3].map(|s| conv(d, reduced[s], 1));
        let blocks = [0, 1, 2].map(|_| DecoderBlock {
            before: conv(d, d, 3),
            after: [conv(d, d, 3), conv(d, d, 3)],
        });
        DecoderStream { lateral, blocks }
    }

    pub fn forward(&self, feats: &[Tensor]) -> Result<Tensor> {
        let mut x = conv2d(&feats[3], &self.lateral[3])?;
        for (i, block) in self.blocks.iter().enumerate() {
            let s = 2 - i;
            let skip = conv2d(&feats[s], &self.lateral[s])?;
            let (_, _, h, w) = skip.dims4("decoder_forward")?;
            x = relu(&conv2d(&x, &block.before)?);
            x = add(&bilinear_resize(&x, h, w)?, &skip)?;
            for conv in &block.after {
                x = relu(&conv2d(&x, conv)?);
            }
        }
        Ok(x)
    }
}

impl Parameters for DecoderStream {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        for (s, c) in self.lateral.iter().enumerate() {
            c.visit(&join(prefix, &format!("lateral{}", s + 1)), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        for (s, c) in self.lateral.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("lateral{}", s + 1)), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Two decoder streams summed, a 1×1 classifier, ×4 upsampling to the input
/// extents and a per-channel normalization.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub rgb: DecoderStream,
    pub thm: DecoderStream,
    pub classifier: ConvParams,
    pub activation: Activation,
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.decoder_width;
        let mut conv = |o: usize, i: usize, k: usize| ConvParams::same(o, i, (k, k), true, cfg.dtype, rng);
        let rgb = DecoderStream::build(&cfg.reduced, d, &mut conv);
        let thm = DecoderStream::build(&cfg.reduced, d, &mut conv);
        let classifier = conv(cfg.num_classes, d, 1);
        Decoder {
            rgb,
            thm,
            classifier,
            activation: cfg.activation,
        }
    }

    /// All weights and biases zero.
    pub fn zeroed(cfg: &ModelConfig) -> Self {
        let d = cfg.decoder_width;
        let conv = |o: usize, i: usize, k: usize| {
            ConvParams::new(
                Tensor::zeros(&[o, i, k, k], cfg.dtype).tracked(),
                Some(Tensor::zeros(&[o], cfg.dtype).tracked()),
                (1, 1),
                (k / 2, k / 2),
            )
            .expect("valid by construction")
        };
        Decoder {
            rgb: DecoderStream::build(&cfg.reduced, d, conv),
            thm: DecoderStream::build(&cfg.reduced, d, conv),
            classifier: conv(cfg.num_classes, d, 1),
            activation: cfg.activation,
        }
    }
}

impl Parameters for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.thm.visit(&join(prefix, "thm"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
        self.thm.visit_mut(&join(prefix, "thm"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Pre-activation class scores [N, C, H, W] at the given output extents.
pub fn decoder_logits(enhanced: &[(Tensor, Tensor)], p: &Decoder, out_h: usize, out_w: usize) -> Result<Tensor> {
    if enhanced.len() != 4 {
        return Err(Error::shape(
            "decoder_forward",
            format!("expected 4 stages of enhanced features, got {}", enhanced.len()),
        ));
    }
    let rgb: Vec<Tensor> = enhanced.iter().map(|(r, _)| r.clone()).collect();
    let thm: Vec<Tensor> = enhanced.iter().map(|(_, t)| t.clone()).collect();
    let x = add(&p.rgb.forward(&rgb)?, &p.thm.forward(&thm)?)?;
    bilinear_resize(&conv2d(&x, &p.classifier)?, out_h, out_w)
}

/// Normalized class maps [N, C, H, W] with values in [0, 1].
pub fn decoder_forward(enhanced: &[(Tensor, Tensor)], p: &Decoder, out_h: usize, out_w: usize) -> Result<Tensor> {
    let logits = decoder_logits(enhanced, p, out_h, out_w)?;
    match p.activation {
        Activation::Sigmoid => Ok(sigmoid(&logits)),
        Activation::Softmax => softmax_channels(&logits),
    }
}
