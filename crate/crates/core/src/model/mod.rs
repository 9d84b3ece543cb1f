//! The full network: asymmetric dual encoder, per-stage recalibration and
//! confidence-gated cross-modality fusion, confidence heads and decoder.

pub mod config;
pub mod encoder;
pub mod heads;
pub mod loss;
pub mod rsf;
pub mod train;

use rand::Rng;

pub use config::{Activation, BranchSpec, GateMode, GateWiring, ModelConfig};
pub use encoder::{encoder_forward, Encoder, StageFeatures};
pub use heads::{confidence_head, decoder_forward, ConfidenceHead, Decoder};
pub use rsf::{feature_recalibration, rsf_forward, ConfidencePair, Recalibration, RsfParams, SpatialBlock};
pub use train::{poly_lr, predict, train, train_step, Batch, Sgd, StepStats, TrainConfig};

use crate::data::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::layers::join;
use crate::tensor::{DType, Parameters, Role, Tensor};

/// Recalibration of both modalities at one stage.
#[derive(Clone, Debug)]
pub struct StageRecalibration {
    pub rgb: Recalibration,
    pub thm: Recalibration,
}

impl Parameters for StageRecalibration {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.thm.visit(&join(prefix, "thm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
        self.thm.visit_mut(&join(prefix, "thm"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub recal: Vec<StageRecalibration>,
    pub rsf: Vec<RsfParams>,
    pub head_rgb: ConfidenceHead,
    pub head_thm: ConfidenceHead,
    pub decoder: Decoder,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Normalized class maps [N, C, H, W].
    pub probs: Tensor,
    pub confidence: ConfidencePair,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype;
        let encoder = Encoder::init(config, rng);
        let recal = (0..4)
            .map(|s| StageRecalibration {
                rgb: Recalibration::init(config.rgb.widths[s], config.reduced[s], config.recal_kernel, dtype, rng),
                thm: Recalibration::init(config.thm.widths[s], config.reduced[s], config.recal_kernel, dtype, rng),
            })
            .collect();
        let rsf = (0..4)
            .map(|s| RsfParams::init(config.reduced[s], config.inner, config.kernel, dtype, rng))
            .collect::<Result<_>>()?;
        Ok(Model {
            config: config.clone(),
            encoder,
            recal,
            rsf,
            head_rgb: ConfidenceHead::init(config.rgb.widths[3], dtype, rng),
            head_thm: ConfidenceHead::init(config.thm.widths[3], dtype, rng),
            decoder: Decoder::init(config, rng),
        })
    }

    /// Copy with every spatial block collapsed into a single convolution.
    pub fn fused(&self) -> Result<Model> {
        let mut out = self.clone();
        out.rsf = self.rsf.iter().map(RsfParams::fused).collect::<Result<_>>()?;
        Ok(out)
    }

    /// Copy whose tensors are untracked, so forward passes build no graph.
    pub fn detached(&self) -> Model {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, t, _| *t = t.detach());
        out
    }

    /// True when every spatial block is in single-convolution form.
    pub fn is_fused(&self) -> bool {
        self.rsf.iter().all(|p| p.rgb.block.is_fused() && p.thm.block.is_fused())
    }

    /// Confidence scores from the raw stage-4 encoder features.
    pub fn confidence(&self, feats: &[StageFeatures]) -> Result<ConfidencePair> {
        Ok(ConfidencePair {
            p_hat_rgb: confidence_head(&feats[3].f_rgb, &self.head_rgb)?,
            p_hat_thm: confidence_head(&feats[3].f_thm, &self.head_thm)?,
        })
    }

    /// Recalibrated and fused stage features, gated by `gates`.
    pub fn enhance(&self, feats: &[StageFeatures], gates: &ConfidencePair, training: bool) -> Result<Vec<(Tensor, Tensor)>> {
        feats
            .iter()
            .zip(&self.recal)
            .zip(&self.rsf)
            .map(|((sf, rc), rsf)| {
                let fr = feature_recalibration(&sf.f_rgb, &rc.rgb)?;
                let ft = feature_recalibration(&sf.f_thm, &rc.thm)?;
                rsf_forward(&fr, &ft, gates, rsf, self.config.wiring, training)
            })
            .collect()
    }

    /// Full forward pass on [N,3,H,W] and [N,1,H,W] inputs in [0, 1].
    pub fn forward(&self, rgb: &Tensor, thm: &Tensor, training: bool) -> Result<ModelOutput> {
        let (n, h, w) = encoder::check_inputs(rgb, thm)?;
        let feats = encoder_forward(rgb, thm, &self.encoder, training)?;
        let confidence = self.confidence(&feats)?;
        let gates = match self.config.gates {
            GateMode::Learned => confidence.clone(),
            GateMode::Frozen => ConfidencePair::constant(n, 0.0, 0.0, self.config.dtype),
        };
        let enhanced = self.enhance(&feats, &gates, training)?;
        let probs = decoder_forward(&enhanced, &self.decoder, h, w)?;
        Ok(ModelOutput { probs, confidence })
    }

    /// Pre-activation class scores; see [`heads::decoder_logits`].
    pub fn logits(&self, rgb: &Tensor, thm: &Tensor) -> Result<Tensor> {
        let (n, h, w) = encoder::check_inputs(rgb, thm)?;
        let feats = encoder_forward(rgb, thm, &self.encoder, false)?;
        let gates = match self.config.gates {
            GateMode::Learned => self.confidence(&feats)?,
            GateMode::Frozen => ConfidencePair::constant(n, 0.0, 0.0, self.config.dtype),
        };
        heads::decoder_logits(&self.enhance(&feats, &gates, false)?, &self.decoder, h, w)
    }

    /// Parameters, running statistics and the architecture, ready to save.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(self);
        for (name, t) in config_entries(&self.config) {
            ck.set(&name, &t);
        }
        ck
    }

    /// Rebuilds a model (multi-branch or fused) from [`Model::to_checkpoint`] output.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let config = config_from_entries(ck)?;
        let mut rng = crate::seed::substream(0, "skeleton");
        let mut model = Model::init(&config, &mut rng)?;
        if ck.contains("rsf1.rgb.block.fused.weight") {
            model = model.fused()?;
        }
        for (s, stage) in model.rsf.iter_mut().enumerate() {
            for (tag, branch) in [("rgb", &mut stage.rgb), ("thm", &mut stage.thm)] {
                if let SpatialBlock::Branches(b) = &mut branch.block {
                    let convs = [
                        ("main.conv", &mut b.main.conv),
                        ("pointwise.conv", &mut b.pointwise.conv),
                        ("horiz.pointwise", &mut b.horiz.pointwise),
                        ("horiz.conv", &mut b.horiz.conv),
                        ("vert.pointwise", &mut b.vert.pointwise),
                        ("vert.conv", &mut b.vert.conv),
                    ];
                    for (name, conv) in convs {
                        if conv.bias.is_none() && ck.contains(&format!("rsf{}.{tag}.block.{name}.bias", s + 1)) {
                            conv.bias = Some(Tensor::zeros(&[conv.c_out()], config.dtype).tracked());
                        }
                    }
                }
            }
        }
        ck.load_into(&mut model)?;
        let mut used = std::collections::HashSet::new();
        model.visit("", &mut |name, _, _| {
            used.insert(name.to_string());
        });
        let stray: Vec<&str> = ck
            .entries()
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !used.contains(*n) && !n.starts_with("config.") && !n.starts_with("fuse_report."))
            .collect();
        if !stray.is_empty() {
            return Err(Error::Corrupt(format!("entries not used by the model: {}", stray.join(", "))));
        }
        Ok(model)
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (s, (rc, rsf)) in self.recal.iter().zip(&self.rsf).enumerate() {
            rc.visit(&join(prefix, &format!("recal{}", s + 1)), f);
            rsf.visit(&join(prefix, &format!("rsf{}", s + 1)), f);
        }
        self.head_rgb.visit(&join(prefix, "head.rgb"), f);
        self.head_thm.visit(&join(prefix, "head.thm"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (s, (rc, rsf)) in self.recal.iter_mut().zip(&mut self.rsf).enumerate() {
            rc.visit_mut(&join(prefix, &format!("recal{}", s + 1)), f);
            rsf.visit_mut(&join(prefix, &format!("rsf{}", s + 1)), f);
        }
        self.head_rgb.visit_mut(&join(prefix, "head.rgb"), f);
        self.head_thm.visit_mut(&join(prefix, "head.thm"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

fn vector(v: &[usize]) -> Tensor {
    Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect()).expect("non-empty")
}

fn config_entries(c: &ModelConfig) -> Vec<(String, Tensor)> {
    let flag = |b: bool| vector(&[b as usize]);
    vec![
        ("config.rgb_widths".into(), vector(&c.rgb.widths)),
        ("config.rgb_blocks".into(), vector(&c.rgb.blocks)),
        ("config.thm_widths".into(), vector(&c.thm.widths)),
        ("config.thm_blocks".into(), vector(&c.thm.blocks)),
        ("config.reduced".into(), vector(&c.reduced)),
        ("config.inner".into(), vector(&[c.inner])),
        ("config.kernel".into(), vector(&[c.kernel])),
        ("config.recal_kernel".into(), vector(&[c.recal_kernel])),
        ("config.decoder_width".into(), vector(&[c.decoder_width])),
        ("config.num_classes".into(), vector(&[c.num_classes])),
        ("config.own_gating".into(), flag(c.wiring == GateWiring::Own)),
        ("config.frozen_gates".into(), flag(c.gates == GateMode::Frozen)),
        ("config.softmax".into(), flag(c.activation == Activation::Softmax)),
        ("config.fp64".into(), flag(c.dtype == DType::F64)),
    ]
}

fn config_from_entries(ck: &Checkpoint) -> Result<ModelConfig> {
    let read = |name: &str, len: usize| -> Result<Vec<usize>> {
        let key = format!("config.{name}");
        let t = ck.get(&key)?;
        if t.numel() != len || t.values().iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Corrupt(format!("{key}: expected {len} non-negative integers")));
        }
        Ok(t.values().iter().map(|&v| v as usize).collect())
    };
    let four = |name: &str| -> Result<[usize; 4]> { Ok(read(name, 4)?.try_into().expect("length checked")) };
    let one = |name: &str| -> Result<usize> { Ok(read(name, 1)?[0]) };
    let config = ModelConfig {
        rgb: BranchSpec {
            widths: four("rgb_widths")?,
            blocks: four("rgb_blocks")?,
        },
        thm: BranchSpec {
            widths: four("thm_widths")?,
            blocks: four("thm_blocks")?,
        },
        reduced: four("reduced")?,
        inner: one("inner")?,
        kernel: one("kernel")?,
        recal_kernel: one("recal_kernel")?,
        decoder_width: one("decoder_width")?,
        num_classes: one("num_classes")?,
        wiring: if one("own_gating")? == 1 { GateWiring::Own } else { GateWiring::Counterpart },
        gates: if one("frozen_gates")? == 1 { GateMode::Frozen } else { GateMode::Learned },
        activation: if one("softmax")? == 1 { Activation::Softmax } else { Activation::Sigmoid },
        dtype: if one("fp64")? == 1 { DType::F64 } else { DType::F32 },
    };
    config.validate().map_err(|e| Error::Corrupt(format!("stored configuration: {e}")))?;
    Ok(config)
}
