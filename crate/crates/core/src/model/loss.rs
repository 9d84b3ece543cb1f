//! Segmentation, confidence-regression and combined training losses.

use super::config::Activation;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::plg::PseudoLabelPair;
use crate::tensor::ops::{add, scale};
use crate::tensor::{DType, Tensor};

/// Lower clamp applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Class weight ω_c = 1/ln(1.05 + p_c) for class frequency p_c.
pub fn class_weight(p_c: f64) -> f64 {
    1.0 / (1.05 + p_c).ln()
}

/// Per-pixel one-hot encoding [N, C, H, W] of a batch of label maps.
pub fn one_hot(labels: &[LabelMap], num_classes: usize, dtype: DType) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| Error::invalid("one_hot: empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut out = vec![0.0; labels.len() * num_classes * plane];
    for (i, y) in labels.iter().enumerate() {
        if (y.height(), y.width()) != (h, w) {
            return Err(Error::shape("one_hot", "label maps differ in extents".to_string()));
        }
        for (pix, &c) in y.values().iter().enumerate() {
            let c = c as usize;
            if c >= num_classes {
                return Err(Error::invalid(format!("one_hot: class {c} outside [0, {num_classes})")));
            }
            out[(i * num_classes + c) * plane + pix] = 1.0;
        }
    }
    Tensor::with_dtype(&[labels.len(), num_classes, h, w], out, dtype)
}

/// True class of every pixel of a one-hot [N, C, H, W] tensor, in
/// (sample, pixel) order.
fn true_classes(y: &Tensor) -> Result<Vec<usize>> {
    let (n, c, h, w) = y.dims4("segmentation_loss")?;
    let plane = h * w;
    let v = y.values();
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        for pix in 0..plane {
            let mut hot = None;
            for ch in 0..c {
                match v[(i * c + ch) * plane + pix] {
                    x if x == 1.0 && hot.is_none() => hot = Some(ch),
                    x if x == 0.0 => {}
                    _ => {
                        return Err(Error::invalid(format!(
                            "segmentation_loss: target is not one-hot at sample {i}, pixel {pix}"
                        )))
                    }
                }
            }
            out.push(hot.ok_or_else(|| {
                Error::invalid(format!("segmentation_loss: no class set at sample {i}, pixel {pix}"))
            })?);
        }
    }
    Ok(out)
}

fn check_freqs(class_freqs: &[f64], c: usize) -> Result<Vec<f64>> {
    if class_freqs.len() != c {
        return Err(Error::shape(
            "segmentation_loss",
            format!("{} class frequencies for {c} classes", class_freqs.len()),
        ));
    }
    if class_freqs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid("segmentation_loss: class frequencies must lie in [0, 1]"));
    }
    let total: f64 = class_freqs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("segmentation_loss: class frequencies sum to {total}, not 1")));
    }
    Ok(class_freqs.iter().map(|&p| class_weight(p)).collect())
}

/// −(1/NHW)·Σ ω_true·[log ŷ_true + complement·Σ_{c≠true} log(1 − ŷ_c)].
fn weighted_log_loss(y_hat: &Tensor, y: &Tensor, class_freqs: &[f64], complement: bool) -> Result<Tensor> {
    let (n, c, h, w) = y_hat.dims4("segmentation_loss")?;
    if y.shape() != y_hat.shape() {
        return Err(Error::shape(
            "segmentation_loss",
            format!("prediction {:?} vs target {:?}", y_hat.shape(), y.shape()),
        ));
    }
    let omega = check_freqs(class_freqs, c)?;
    let truth = true_classes(y)?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let pv = y_hat.values();
    let idx = move |i: usize, ch: usize, pix: usize| (i * c + ch) * plane + pix;

    let mut total = 0.0;
    for i in 0..n {
        for pix in 0..plane {
            let t = truth[i * plane + pix];
            let mut term = pv[idx(i, t, pix)].max(LOG_CLAMP).ln();
            if complement {
                for ch in (0..c).filter(|&ch| ch != t) {
                    term += (1.0 - pv[idx(i, ch, pix)]).max(LOG_CLAMP).ln();
                }
            }
            total -= omega[t] * term;
        }
    }
    let pred = y_hat.clone();
    Ok(Tensor::from_op(
        vec![1],
        y_hat.dtype(),
        vec![total / count],
        vec![y_hat.clone()],
        Box::new(move |g, _| {
            let pv = pred.values();
            let mut d = vec![0.0; pv.len()];
            for i in 0..n {
                for pix in 0..plane {
                    let t = truth[i * plane + pix];
                    let s = g[0] * omega[t] / count;
                    let p = pv[idx(i, t, pix)];
                    if p > LOG_CLAMP {
                        d[idx(i, t, pix)] = -s / p;
                    }
                    if complement {
                        for ch in (0..c).filter(|&ch| ch != t) {
                            let q = 1.0 - pv[idx(i, ch, pix)];
                            if q > LOG_CLAMP {
                                d[idx(i, ch, pix)] = s / q;
                            }
                        }
                    }
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Class-weighted cross-entropy on the true-class probability:
/// L = −(1/HW)·Σ ω_{h,w}·log ŷ_{true}, averaged over the batch, with
/// ω_{h,w} = 1/ln(1.05 + p_c) for the pixel's ground-truth class c.
pub fn segmentation_loss(y_hat: &Tensor, y: &Tensor, class_freqs: &[f64]) -> Result<Tensor> {
    weighted_log_loss(y_hat, y, class_freqs, false)
}

/// The loss used for training. Softmax outputs use [`segmentation_loss`]
/// unchanged; independent sigmoid outputs also penalize the other channels
/// through log(1 − ŷ_c) with the same pixel weight.
pub fn training_segmentation_loss(y_hat: &Tensor, y: &Tensor, class_freqs: &[f64], activation: Activation) -> Result<Tensor> {
    weighted_log_loss(y_hat, y, class_freqs, activation == Activation::Sigmoid)
}

/// Smooth L1 of an error magnitude: 0.5e² below 1, e − 0.5 above.
pub fn smooth_l1(e: f64) -> f64 {
    let e = e.abs();
    if e < 1.0 {
        0.5 * e * e
    } else {
        e - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Scalar form for one image: smooth_l1(p_rgb − p̂_rgb) + smooth_l1(p_thm − p̂_thm).
pub fn regression_loss(pair: &PseudoLabelPair, p_hat_rgb: f64, p_hat_thm: f64) -> f64 {
    smooth_l1(pair.p_rgb - p_hat_rgb) + smooth_l1(pair.p_thm - p_hat_thm)
}

/// Batch form: the per-image regression loss averaged over the batch.
/// `p_hat_rgb` and `p_hat_thm` hold one confidence per sample.
pub fn regression_loss_batch(targets: &[PseudoLabelPair], p_hat_rgb: &Tensor, p_hat_thm: &Tensor) -> Result<Tensor> {
    let n = targets.len();
    if n == 0 || p_hat_rgb.numel() != n || p_hat_thm.numel() != n {
        return Err(Error::shape(
            "regression_loss",
            format!("{n} targets for {} and {} confidences", p_hat_rgb.numel(), p_hat_thm.numel()),
        ));
    }
    let one = |pred: &Tensor, target: Vec<f64>| {
        let total: f64 = pred.values().iter().zip(&target).map(|(p, t)| smooth_l1(p - t)).sum();
        let keep = pred.clone();
        Tensor::from_op(
            vec![1],
            pred.dtype(),
            vec![total / n as f64],
            vec![pred.clone()],
            Box::new(move |g, _| {
                let d = keep
                    .values()
                    .iter()
                    .zip(&target)
                    .map(|(p, t)| g[0] * smooth_l1_grad(p - t) / n as f64)
                    .collect();
                vec![Some(d)]
            }),
        )
    };
    let rgb = one(p_hat_rgb, targets.iter().map(|t| t.p_rgb).collect());
    let thm = one(p_hat_thm, targets.iter().map(|t| t.p_thm).collect());
    add(&rgb, &thm)
}

/// L = L_seg + λ·L_reg.
pub fn total_loss(seg: &Tensor, reg: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("total_loss: lambda must be non-negative, got {lambda}")));
    }
    add(seg, &scale(reg, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weight_values() {
        assert!((class_weight(0.95) - 1.442695).abs() < 1e-6);
        assert!((class_weight(0.0) - 20.495934).abs() < 1e-6);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = total_loss(&Tensor::scalar(1.0), &Tensor::scalar(2.0), 0.3).unwrap();
        assert!((t.item() - 1.6).abs() < 1e-15);
        let t = total_loss(&Tensor::scalar(1.0), &Tensor::scalar(2.0), 0.0).unwrap();
        assert_eq!(t.item(), 1.0);
        assert!(total_loss(&Tensor::scalar(1.0), &Tensor::scalar(2.0), -0.1).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let labels = [LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap()];
        let y = one_hot(&labels, 2, DType::F64).unwrap();
        let loss = segmentation_loss(&y, &y, &[0.5, 0.5]).unwrap();
        assert_eq!(loss.item(), 0.0);
        let loss = training_segmentation_loss(&y, &y, &[0.5, 0.5], Activation::Sigmoid).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn uniform_prediction_loss() {
        let labels = [LabelMap::new(1, 2, vec![0, 1]).unwrap()];
        let y = one_hot(&labels, 2, DType::F64).unwrap();
        let half = Tensor::full(&[1, 2, 1, 2], 0.5, DType::F64);
        let loss = segmentation_loss(&half, &y, &[0.5, 0.5]).unwrap();
        let expect = class_weight(0.5) * 2f64.ln();
        assert!((loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets() {
        let y = Tensor::full(&[1, 2, 1, 1], 0.5, DType::F64);
        assert!(segmentation_loss(&y, &y, &[0.5, 0.5]).is_err());
        let labels = [LabelMap::new(1, 1, vec![1]).unwrap()];
        let y = one_hot(&labels, 2, DType::F64).unwrap();
        assert!(segmentation_loss(&y, &y, &[0.3, 0.3]).is_err());
        assert!(one_hot(&labels, 1, DType::F64).is_err());
    }

    #[test]
    fn regression_batch_matches_scalar_form() {
        let pairs = [PseudoLabelPair::new(0.2, 0.9).unwrap(), PseudoLabelPair::new(1.0, 0.0).unwrap()];
        let pr = Tensor::new(&[2, 1], vec![0.7, 0.1]).unwrap();
        let pt = Tensor::new(&[2, 1], vec![0.4, 0.6]).unwrap();
        let batch = regression_loss_batch(&pairs, &pr, &pt).unwrap().item();
        let scalar = (regression_loss(&pairs[0], 0.7, 0.4) + regression_loss(&pairs[1], 0.1, 0.6)) / 2.0;
        assert!((batch - scalar).abs() < 1e-15);
    }
}
