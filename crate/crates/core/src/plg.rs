//! Pseudo-label generation.
//!
//! For each modality: grayscale intensity → multi-scale center-surround
//! saliency → Otsu binarization → IoU against the binarized ground truth.
//! The two IoU scores are the soft targets for the confidence heads.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Single-channel intensities in [0, 255], shape [H, W].
#[derive(Clone, Debug)]
pub struct IntensityMap(Tensor);

/// Saliency values in [0, 255], shape [H, W].
#[derive(Clone, Debug)]
pub struct SaliencyMap(Tensor);

/// Strictly 0/1 mask, shape [H, W].
#[derive(Clone, Debug)]
pub struct BinaryMask(Tensor);

fn plane(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::shape(op, format!("expected [H,W], got {s:?}"))),
    }
}

fn check_range(op: &'static str, t: &Tensor) -> Result<()> {
    if t.values().iter().any(|v| !(0.0..=255.0).contains(v)) {
        return Err(Error::invalid(format!("{op}: values must lie in [0, 255]")));
    }
    Ok(())
}

macro_rules! plane_accessors {
    ($t:ty) => {
        impl $t {
            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn values(&self) -> &[f64] {
                self.0.values()
            }

            pub fn height(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[1]
            }
        }
    };
}

plane_accessors!(IntensityMap);
plane_accessors!(SaliencyMap);
plane_accessors!(BinaryMask);

impl IntensityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        plane("IntensityMap", &values)?;
        check_range("IntensityMap", &values)?;
        Ok(IntensityMap(values))
    }

    /// Scales a [1,H,W] or [H,W] image with values in [0,1] to [0,255].
    pub fn from_unit(img: &Tensor) -> Result<Self> {
        let (h, w) = match img.shape() {
            &[1, h, w] | &[h, w] => (h, w),
            s => return Err(Error::shape("IntensityMap", format!("expected [1,H,W], got {s:?}"))),
        };
        let v = img.values().iter().map(|v| v * 255.0).collect();
        IntensityMap::new(Tensor::new(&[h, w], v)?)
    }

    /// Linear stretch so the darkest pixel maps to 0 and the brightest to 255.
    pub fn stretched(&self) -> IntensityMap {
        let (lo, hi) = (self.0.min_value(), self.0.max_value());
        if hi <= lo {
            return self.clone();
        }
        let v = self.values().iter().map(|v| (v - lo) * 255.0 / (hi - lo)).collect();
        IntensityMap(Tensor::new(self.0.shape(), v).expect("same shape"))
    }
}

impl SaliencyMap {
    pub fn new(values: Tensor) -> Result<Self> {
        plane("SaliencyMap", &values)?;
        check_range("SaliencyMap", &values)?;
        Ok(SaliencyMap(values))
    }
}

impl BinaryMask {
    pub fn new(values: Tensor) -> Result<Self> {
        plane("BinaryMask", &values)?;
        if values.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("BinaryMask: entries must be 0 or 1"));
        }
        Ok(BinaryMask(values))
    }

    pub fn from_bools(h: usize, w: usize, bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        let v = bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        BinaryMask::new(Tensor::new(&[h, w], v)?)
    }

    pub fn get(&self, i: usize) -> bool {
        self.0.values()[i] != 0.0
    }

    pub fn count(&self) -> usize {
        self.0.values().iter().filter(|&&v| v != 0.0).count()
    }
}

/// ITU-R BT.601 luma of a [3,H,W] image with values in [0,255].
pub fn to_grayscale(rgb: &Tensor) -> Result<IntensityMap> {
    let (h, w) = match rgb.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("to_grayscale", format!("expected [3,H,W], got {s:?}"))),
    };
    let n = h * w;
    let v = rgb.values();
    let luma = (0..n)
        .map(|i| 0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i])
        .collect();
    IntensityMap::new(Tensor::new(&[h, w], luma)?)
}

/// Summed-area table with one row and column of zero padding.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], h: usize, w: usize) -> Integral {
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, sums }
    }

    /// Sum over rows y0..y1 and columns x0..x1 (exclusive ends).
    fn rect(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        let s = |y: usize, x: usize| self.sums[y * (self.w + 1) + x];
        s(y1, x1) - s(y0, x1) - s(y1, x0) + s(y0, x0)
    }
}

/// Radii from `scales` usable on an h×w image: each clipped into
/// [1, (min(h,w)−1)/2], duplicates dropped, order kept.
pub fn clip_scales(scales: &[usize], h: usize, w: usize) -> Vec<usize> {
    let max_r = (h.min(w).saturating_sub(1) / 2).max(1);
    let mut out: Vec<usize> = Vec::new();
    for &r in scales {
        let r = r.clamp(1, max_r);
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// Multi-scale center-surround saliency.
///
/// At each radius r the surround is the mean over the (2r+1)² box centred on
/// the pixel, with the window clamped to the image. The on-center response
/// max(I − mean, 0) and off-center response max(mean − I, 0) are added over
/// all scales, and the result is rescaled so its maximum is 255.
pub fn fine_grained_saliency(img: &IntensityMap, scales: &[usize]) -> Result<SaliencyMap> {
    if scales.is_empty() {
        return Err(Error::invalid("fine_grained_saliency: scale list is empty"));
    }
    let (h, w) = (img.height(), img.width());
    for &r in scales {
        if r == 0 || 2 * r >= h.min(w) {
            return Err(Error::invalid(format!(
                "fine_grained_saliency: radius {r} must be ≥ 1 and < min(H,W)/2 = {}",
                h.min(w) as f64 / 2.0
            )));
        }
    }
    let v = img.values();
    let integral = Integral::new(v, h, w);
    let mut acc = vec![0.0; h * w];
    for &r in scales {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let surround = integral.rect(y0, x0, y1, x1) / count;
                let center = v[y * w + x];
                let on = (center - surround).max(0.0);
                let off = (surround - center).max(0.0);
                acc[y * w + x] += on + off;
            }
        }
    }
    let peak = acc.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        acc.iter_mut().for_each(|a| *a = (*a * 255.0 / peak).min(255.0));
    }
    SaliencyMap::new(Tensor::new(&[h, w], acc)?)
}

/// 256-bin histogram index of a [0,255] value.
fn bin(v: f64) -> usize {
    (v.floor().max(0.0) as usize).min(255)
}

/// Otsu's threshold over the 256-bin histogram.
///
/// The split point t* maximises the between-class variance of
/// {bin ≤ t} vs {bin > t}; ties go to the smallest t. The returned threshold
/// is the largest map value in the lower class, so `mask = value > threshold`
/// reproduces the split exactly and the threshold lies within [min, max].
/// A map with a single occupied bin returns its minimum and an empty mask.
pub fn otsu_binarize(m: &SaliencyMap) -> (f64, BinaryMask) {
    let v = m.values();
    let mut hist = [0u64; 256];
    for &x in v {
        hist[bin(x)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    // between-class variance ∝ (n1·s0 − n0·s1)² / (n0·n1), compared exactly
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for t in 0..255 {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_sum - s0;
        let diff = (n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }

    let (threshold, split) = match best {
        Some((t, _, _)) => {
            let th = v.iter().copied().filter(|&x| bin(x) <= t).fold(f64::NEG_INFINITY, f64::max);
            (th, Some(t))
        }
        None => (m.tensor().min_value(), None),
    };
    let mask = BinaryMask::from_bools(
        m.height(),
        m.width(),
        v.iter().map(|&x| split.is_some() && x > threshold),
    )
    .expect("binary by construction");
    (threshold, mask)
}

/// Foreground (any class other than 0) versus background.
pub fn binarize_ground_truth(y: &LabelMap, num_classes: usize) -> Result<BinaryMask> {
    if let Some(&bad) = y.values().iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::invalid(format!(
            "binarize_ground_truth: class index {bad} outside [0, {num_classes})"
        )));
    }
    BinaryMask::from_bools(y.height(), y.width(), y.values().iter().map(|&c| c != 0))
}

/// |a ∧ b| / |a ∨ b|, defined as 0 when the union is empty.
pub fn iou_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(
            "iou_score",
            format!("{:?} vs {:?}", a.tensor().shape(), b.tensor().shape()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU soft labels for the two modalities, each in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabelPair {
    pub p_rgb: f64,
    pub p_thm: f64,
}

impl PseudoLabelPair {
    pub fn new(p_rgb: f64, p_thm: f64) -> Result<Self> {
        for (name, p) in [("p_rgb", p_rgb), ("p_thm", p_thm)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("PseudoLabelPair: {name} = {p} outside [0,1]")));
            }
        }
        Ok(PseudoLabelPair { p_rgb, p_thm })
    }
}

/// How thermal intensities are presented to the saliency detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ThermalInput {
    /// Raw 8-bit values.
    #[default]
    Raw,
    /// Min-max stretched to the full [0, 255] range first.
    Stretched,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlgConfig {
    /// Box radii; clipped to each image with [`clip_scales`].
    pub scales: Vec<usize>,
    pub thermal: ThermalInput,
    pub num_classes: usize,
}

pub const DEFAULT_SCALES: [usize; 3] = [2, 4, 8];

impl Default for PlgConfig {
    fn default() -> Self {
        PlgConfig {
            scales: DEFAULT_SCALES.to_vec(),
            thermal: ThermalInput::Raw,
            num_classes: 256,
        }
    }
}

/// Every intermediate of one pseudo-label computation.
#[derive(Clone, Debug)]
pub struct PseudoLabelDetail {
    pub labels: PseudoLabelPair,
    pub saliency_rgb: SaliencyMap,
    pub saliency_thm: SaliencyMap,
    pub mask_rgb: BinaryMask,
    pub mask_thm: BinaryMask,
    pub threshold_rgb: f64,
    pub threshold_thm: f64,
    pub ground_truth: BinaryMask,
}

/// Runs the full pipeline on `rgb` [3,H,W] and `thm` [1,H,W] with values in
/// [0,1] and the label map `gt`.
pub fn pseudo_label_detail(rgb: &Tensor, thm: &Tensor, gt: &LabelMap, cfg: &PlgConfig) -> Result<PseudoLabelDetail> {
    let (h, w) = (gt.height(), gt.width());
    if rgb.shape() != [3, h, w] || thm.shape() != [1, h, w] {
        return Err(Error::shape(
            "generate_pseudo_labels",
            format!("rgb {:?}, thm {:?}, labels [{h}, {w}]", rgb.shape(), thm.shape()),
        ));
    }
    let scales = clip_scales(&cfg.scales, h, w);
    let rgb255 = Tensor::with_dtype(rgb.shape(), rgb.values().iter().map(|v| v * 255.0).collect(), DType::F64)?;
    let gray = to_grayscale(&rgb255)?;
    let mut thermal = IntensityMap::from_unit(thm)?;
    if cfg.thermal == ThermalInput::Stretched {
        thermal = thermal.stretched();
    }
    let saliency_rgb = fine_grained_saliency(&gray, &scales)?;
    let saliency_thm = fine_grained_saliency(&thermal, &scales)?;
    let (threshold_rgb, mask_rgb) = otsu_binarize(&saliency_rgb);
    let (threshold_thm, mask_thm) = otsu_binarize(&saliency_thm);
    let ground_truth = binarize_ground_truth(gt, cfg.num_classes)?;
    let labels = PseudoLabelPair::new(iou_score(&mask_rgb, &ground_truth)?, iou_score(&mask_thm, &ground_truth)?)?;
    Ok(PseudoLabelDetail {
        labels,
        saliency_rgb,
        saliency_thm,
        mask_rgb,
        mask_thm,
        threshold_rgb,
        threshold_thm,
        ground_truth,
    })
}

/// (p_rgb, p_thm) for one image pair; see [`pseudo_label_detail`].
pub fn generate_pseudo_labels(rgb: &Tensor, thm: &Tensor, gt: &LabelMap, cfg: &PlgConfig) -> Result<PseudoLabelPair> {
    Ok(pseudo_label_detail(rgb, thm, gt, cfg)?.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, v: Vec<f64>) -> SaliencyMap {
        SaliencyMap::new(Tensor::new(&[h, w], v).unwrap()).unwrap()
    }

    fn intensity(h: usize, w: usize, v: Vec<f64>) -> IntensityMap {
        IntensityMap::new(Tensor::new(&[h, w], v).unwrap()).unwrap()
    }

    #[test]
    fn grayscale_values() {
        let gray = to_grayscale(&Tensor::full(&[3, 2, 2], 77.0, DType::F64)).unwrap();
        assert!(gray.values().iter().all(|&v| (v - 77.0).abs() < 1e-12));
        let mut red = vec![0.0; 12];
        red[..4].fill(255.0);
        let gray = to_grayscale(&Tensor::new(&[3, 2, 2], red).unwrap()).unwrap();
        assert!((gray.values()[0] - 76.245).abs() < 1e-9);
        let zero = to_grayscale(&Tensor::zeros(&[3, 2, 2], DType::F64)).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_has_no_saliency() {
        let s = fine_grained_saliency(&intensity(10, 10, vec![90.0; 100]), &[2, 4]).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saliency_rejects_bad_scales() {
        let img = intensity(10, 10, vec![0.0; 100]);
        assert!(fine_grained_saliency(&img, &[]).is_err());
        assert!(fine_grained_saliency(&img, &[5]).is_err());
        assert!(fine_grained_saliency(&img, &[0]).is_err());
        assert_eq!(clip_scales(&[2, 4, 8], 10, 10), vec![2, 4]);
    }

    #[test]
    fn saliency_commutes_with_mirroring() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (12, 15);
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..255.0)).collect();
        let mirrored: Vec<f64> = (0..h * w).map(|i| v[(i / w) * w + (w - 1 - i % w)]).collect();
        let a = fine_grained_saliency(&intensity(h, w, v), &[2, 3]).unwrap();
        let b = fine_grained_saliency(&intensity(h, w, mirrored), &[2, 3]).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert!((a.values()[y * w + x] - b.values()[y * w + w - 1 - x]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bright_pixel_is_most_salient() {
        let mut v = vec![0.0; 256];
        v[7 * 16 + 9] = 255.0;
        let s = fine_grained_saliency(&intensity(16, 16, v), &[2, 4]).unwrap();
        let (argmax, _) = s
            .values()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) });
        assert_eq!(argmax, 7 * 16 + 9);
        assert_eq!(s.values()[argmax], 255.0);
    }

    #[test]
    fn otsu_two_populations() {
        let v: Vec<f64> = (0..40).map(|i| if i % 3 == 0 { 255.0 } else { 0.0 }).collect();
        let (t, mask) = otsu_binarize(&map(5, 8, v.clone()));
        assert!((0.0..255.0).contains(&t));
        for (i, &x) in v.iter().enumerate() {
            assert_eq!(mask.get(i), x == 255.0);
        }

        let v: Vec<f64> = (0..40).map(|i| if i < 13 { 200.0 } else { 50.0 }).collect();
        let (t, mask) = otsu_binarize(&map(5, 8, v.clone()));
        assert!((50.0..=199.0).contains(&t));
        for (i, &x) in v.iter().enumerate() {
            assert_eq!(mask.get(i), x == 200.0);
        }
    }

    #[test]
    fn otsu_constant_is_degenerate() {
        let (t, mask) = otsu_binarize(&map(3, 3, vec![42.0; 9]));
        assert_eq!(t, 42.0);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn ground_truth_binarization() {
        let bg = LabelMap::new(2, 2, vec![0; 4]).unwrap();
        assert_eq!(binarize_ground_truth(&bg, 4).unwrap().count(), 0);
        let all = LabelMap::new(2, 2, vec![3; 4]).unwrap();
        assert_eq!(binarize_ground_truth(&all, 4).unwrap().count(), 4);
        let mixed = LabelMap::new(1, 4, vec![0, 1, 0, 2]).unwrap();
        let m = binarize_ground_truth(&mixed, 4).unwrap();
        assert_eq!((0..4).map(|i| m.get(i)).collect::<Vec<_>>(), [false, true, false, true]);
        assert!(binarize_ground_truth(&all, 3).is_err());
    }

    #[test]
    fn iou_cases() {
        let m = |bits: &[u8]| BinaryMask::from_bools(4, 4, bits.iter().map(|&b| b == 1)).unwrap();
        let a = m(&[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(iou_score(&a, &a).unwrap(), 1.0);
        let b = m(&[0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(iou_score(&a, &b).unwrap(), 0.0);
        let c = m(&[0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        // intersection 2, union 6
        assert!((iou_score(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = m(&[0; 16]);
        assert_eq!(iou_score(&empty, &empty).unwrap(), 0.0);
        let other = BinaryMask::from_bools(2, 8, [false; 16]).unwrap();
        assert!(iou_score(&a, &other).is_err());
    }

    #[test]
    fn empty_ground_truth_gives_zero_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rgb = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, DType::F64, &mut rng);
        let thm = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, DType::F64, &mut rng);
        let gt = LabelMap::new(16, 16, vec![0; 256]).unwrap();
        let p = generate_pseudo_labels(&rgb, &thm, &gt, &PlgConfig::default()).unwrap();
        assert_eq!(p, PseudoLabelPair { p_rgb: 0.0, p_thm: 0.0 });
    }
}
