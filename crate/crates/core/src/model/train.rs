//! SGD with momentum, the poly learning-rate schedule, and the training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::loss::{one_hot, regression_loss_batch, total_loss, training_segmentation_loss};
use super::Model;
use crate::data::{augment, AugmentPolicy, LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::plg::{generate_pseudo_labels, PlgConfig, PseudoLabelPair};
use crate::seed::substream;
use crate::tensor::{DType, Parameters, Role, Tensor};

/// lr0·(1 − iter/iter_max)^power.
pub fn poly_lr(lr0: f64, iter: usize, iter_max: usize, power: f64) -> Result<f64> {
    if iter_max == 0 || iter > iter_max {
        return Err(Error::invalid(format!(
            "poly_lr: iteration {iter} outside [0, {iter_max}] (iter_max must be positive)"
        )));
    }
    Ok(lr0 * (1.0 - iter as f64 / iter_max as f64).powf(power))
}

/// Momentum SGD with coupled weight decay:
/// v ← μ·v + g + wd·θ, θ ← θ − lr·v.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable tensor from its accumulated gradient and
    /// replaces it with a fresh tracked leaf (so gradients start from zero).
    pub fn step(&mut self, params: &mut dyn Parameters, lr: f64) -> Result<()> {
        let mut failure = None;
        params.visit_mut("", &mut |name, t, role| {
            if role != Role::Param || failure.is_some() {
                return;
            }
            let grad = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
            if grad.iter().any(|g| !g.is_finite()) {
                failure = Some(Error::NonFinite(format!("gradient of {name}")));
                return;
            }
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; t.numel()]);
            let theta = t.values();
            let next: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .zip(v.iter_mut())
                .map(|((&th, &g), v)| {
                    *v = self.momentum * *v + g + self.weight_decay * th;
                    th - lr * *v
                })
                .collect();
            *t = Tensor::with_dtype(t.shape(), next, t.dtype()).expect("same shape").tracked();
        });
        failure.map_or(Ok(()), Err)
    }
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Tensor,
    pub thm: Tensor,
    pub labels: Vec<LabelMap>,
    pub pseudo: Vec<PseudoLabelPair>,
}

fn stack(parts: &[&Tensor], dtype: DType) -> Result<Tensor> {
    let shape = parts[0].shape();
    if parts.iter().any(|p| p.shape() != shape) {
        return Err(Error::shape("batch", "samples differ in extents".to_string()));
    }
    let mut full = vec![parts.len()];
    full.extend_from_slice(shape);
    Tensor::with_dtype(&full, parts.iter().flat_map(|p| p.values().iter().copied()).collect(), dtype)
}

impl Batch {
    /// Stacks samples; every one needs pseudo-labels.
    pub fn from_samples(samples: &[SamplePair], dtype: DType) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::invalid("batch: no samples"));
        }
        let pseudo = samples
            .iter()
            .map(|s| {
                s.pseudo.ok_or_else(|| Error::Sample {
                    id: s.id.clone(),
                    msg: "pseudo-labels missing".into(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Batch {
            rgb: stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>(), dtype)?,
            thm: stack(&samples.iter().map(|s| &s.thm).collect::<Vec<_>>(), dtype)?,
            labels: samples.iter().map(|s| s.gt.clone()).collect(),
            pseudo,
        })
    }

    /// Inputs only, for inference.
    pub fn inputs(samples: &[SamplePair], dtype: DType) -> Result<(Tensor, Tensor)> {
        if samples.is_empty() {
            return Err(Error::invalid("batch: no samples"));
        }
        Ok((
            stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>(), dtype)?,
            stack(&samples.iter().map(|s| &s.thm).collect::<Vec<_>>(), dtype)?,
        ))
    }
}

/// Losses and schedule value of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub seg: f64,
    pub reg: f64,
}

/// One forward/backward/update on `batch`. The loss is
/// L_seg + λ·L_reg evaluated before the update.
pub fn train_step(model: &mut Model, batch: &Batch, opt: &mut Sgd, lr: f64, class_freqs: &[f64], lambda: f64) -> Result<StepStats> {
    let out = model.forward(&batch.rgb, &batch.thm, true)?;
    let y = one_hot(&batch.labels, model.config.num_classes, out.probs.dtype())?;
    let seg = training_segmentation_loss(&out.probs, &y, class_freqs, model.config.activation)?;
    let reg = regression_loss_batch(&batch.pseudo, &out.confidence.p_hat_rgb, &out.confidence.p_hat_thm)?;
    let total = total_loss(&seg, &reg, lambda)?;
    if !total.item().is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (segmentation {}, regression {})",
            seg.item(),
            reg.item()
        )));
    }
    total.backward()?;
    opt.step(model, lr)?;
    Ok(StepStats {
        step: 0,
        lr,
        loss: total.item(),
        seg: seg.item(),
        reg: reg.item(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of updates; also the end of the poly schedule.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub power: f64,
    pub augment: Option<AugmentPolicy>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lambda: 0.3,
            power: 0.9,
            augment: Some(AugmentPolicy::default()),
            seed: 0,
        }
    }
}

/// Pixel share of every class over all samples.
pub fn class_frequencies(samples: &[SamplePair], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for s in samples {
        for &c in s.gt.values() {
            counts[c as usize] += 1;
            total += 1;
        }
    }
    counts.into_iter().map(|k| k as f64 / total.max(1) as f64).collect()
}

/// Fills in missing pseudo-labels with the default saliency pipeline.
pub fn ensure_pseudo_labels(samples: &mut [SamplePair], num_classes: usize) -> Result<()> {
    let cfg = PlgConfig {
        num_classes,
        ..PlgConfig::default()
    };
    for s in samples.iter_mut().filter(|s| s.pseudo.is_none()) {
        s.pseudo = Some(generate_pseudo_labels(&s.rgb, &s.thm, &s.gt, &cfg)?);
    }
    Ok(())
}

/// Runs `cfg.steps` updates over shuffled mini-batches, calling `on_step`
/// with the updated model after each one.
pub fn train(
    model: &mut Model,
    samples: &[SamplePair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepStats, &Model) -> Result<()>,
) -> Result<Vec<StepStats>> {
    if samples.is_empty() {
        return Err(Error::invalid("train: empty dataset"));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config {
            key: if cfg.batch_size == 0 { "batch_size" } else { "steps" }.into(),
            msg: "must be positive".into(),
        });
    }
    let c = model.config.num_classes;
    let mut samples = samples.to_vec();
    for s in &samples {
        s.check_classes(c)?;
    }
    ensure_pseudo_labels(&mut samples, c)?;
    let freqs = class_frequencies(&samples, c);

    let mut order_rng = substream(cfg.seed, "order");
    let mut aug_rng = substream(cfg.seed, "augment");
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(samples.len()) {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let s = &samples[order.pop().expect("refilled")];
            picked.push(match &cfg.augment {
                Some(policy) => augment(s, &mut aug_rng, policy)?,
                None => s.clone(),
            });
        }
        let batch = Batch::from_samples(&picked, model.config.dtype)?;
        let lr = poly_lr(cfg.lr, step, cfg.steps, cfg.power)?;
        let mut stats = train_step(model, &batch, &mut opt, lr, &freqs, cfg.lambda)?;
        stats.step = step;
        on_step(&stats, model)?;
        log.push(stats);
    }
    Ok(log)
}

/// Per-pixel argmax over the normalized class maps; ties go to the lowest index.
pub fn argmax_labels(probs: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = probs.dims4("predict")?;
    let plane = h * w;
    let v = probs.values();
    (0..n)
        .map(|i| {
            let labels = (0..plane)
                .map(|pix| {
                    let mut best = 0;
                    for ch in 1..c {
                        if v[(i * c + ch) * plane + pix] > v[(i * c + best) * plane + pix] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, labels)
        })
        .collect()
}

/// Inference-mode label maps for [N,3,H,W] / [N,1,H,W] inputs.
pub fn predict(model: &Model, rgb: &Tensor, thm: &Tensor) -> Result<Vec<LabelMap>> {
    argmax_labels(&model.detached().forward(rgb, thm, false)?.probs)
}
