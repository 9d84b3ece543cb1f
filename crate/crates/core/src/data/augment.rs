//! Random flip, crop and rotation, applied identically to every modality.

use rand::Rng;

use super::{LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Chance of a horizontal flip.
    pub flip_prob: f64,
    /// Output extents (height, width); `None` keeps the full image.
    pub crop: Option<(usize, usize)>,
    /// Rotation angle drawn uniformly from ±this many degrees.
    pub max_rotation_deg: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            crop: None,
            max_rotation_deg: 10.0,
        }
    }
}

/// A concrete geometric transform. Output pixel (y, x) reads the source
/// image at [`Transform::source`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip: bool,
    pub top: usize,
    pub left: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub angle_deg: f64,
    src_h: usize,
    src_w: usize,
}

impl Transform {
    pub fn new(
        src_h: usize,
        src_w: usize,
        flip: bool,
        (top, left): (usize, usize),
        (out_h, out_w): (usize, usize),
        angle_deg: f64,
    ) -> Result<Self> {
        if out_h == 0 || out_w == 0 || top + out_h > src_h || left + out_w > src_w {
            return Err(Error::invalid(format!(
                "augment: crop {out_h}x{out_w} at ({top}, {left}) does not fit a {src_h}x{src_w} image"
            )));
        }
        Ok(Transform {
            flip,
            top,
            left,
            out_h,
            out_w,
            angle_deg,
            src_h,
            src_w,
        })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Transform::new(h, w, false, (0, 0), (h, w), 0.0).expect("full-size crop fits")
    }

    /// Draws a transform for an h×w image.
    pub fn sample<R: Rng + ?Sized>(h: usize, w: usize, policy: &AugmentPolicy, rng: &mut R) -> Result<Self> {
        let (ch, cw) = policy.crop.unwrap_or((h, w));
        if ch > h || cw > w {
            return Err(Error::invalid(format!("augment: crop {ch}x{cw} exceeds image {h}x{w}")));
        }
        let flip = rng.random_bool(policy.flip_prob.clamp(0.0, 1.0));
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        let a = policy.max_rotation_deg.abs();
        let angle = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        Transform::new(h, w, flip, (top, left), (ch, cw), angle)
    }

    /// Source coordinates (row, column) in pixel units for output pixel (y, x).
    /// The rotation turns about the source image center, then the flip mirrors columns.
    pub fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (mut sy, mut sx) = ((self.top + y) as f64, (self.left + x) as f64);
        if self.angle_deg != 0.0 {
            let (cy, cx) = ((self.src_h as f64 - 1.0) / 2.0, (self.src_w as f64 - 1.0) / 2.0);
            let (s, c) = self.angle_deg.to_radians().sin_cos();
            let (dy, dx) = (sy - cy, sx - cx);
            sy = cy + c * dy - s * dx;
            sx = cx + s * dy + c * dx;
        }
        if self.flip {
            sx = self.src_w as f64 - 1.0 - sx;
        }
        (sy, sx)
    }

    fn sample_bilinear(&self, plane: &[f64], sy: f64, sx: f64) -> f64 {
        let (h, w) = (self.src_h as isize, self.src_w as isize);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let at = |y: isize, x: isize| {
            if (0..h).contains(&y) && (0..w).contains(&x) {
                plane[(y * w + x) as usize]
            } else {
                0.0
            }
        };
        let (y0, x0) = (y0 as isize, x0 as isize);
        if fy == 0.0 && fx == 0.0 {
            return at(y0, x0);
        }
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    }

    fn warp_image(&self, img: &Tensor) -> Result<Tensor> {
        let c = img.shape()[0];
        let plane = self.src_h * self.src_w;
        let v = img.values();
        let mut out = Vec::with_capacity(c * self.out_h * self.out_w);
        for ch in 0..c {
            let src = &v[ch * plane..(ch + 1) * plane];
            for y in 0..self.out_h {
                for x in 0..self.out_w {
                    let (sy, sx) = self.source(y, x);
                    out.push(self.sample_bilinear(src, sy, sx).clamp(0.0, 1.0));
                }
            }
        }
        Tensor::with_dtype(&[c, self.out_h, self.out_w], out, img.dtype())
    }

    fn warp_labels(&self, gt: &LabelMap) -> Result<LabelMap> {
        let mut out = Vec::with_capacity(self.out_h * self.out_w);
        for y in 0..self.out_h {
            for x in 0..self.out_w {
                let (sy, sx) = self.source(y, x);
                let (ny, nx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
                let inside = ny >= 0.0 && nx >= 0.0 && ny < self.src_h as f64 && nx < self.src_w as f64;
                out.push(if inside { gt.get(ny as usize, nx as usize) } else { 0 });
            }
        }
        LabelMap::new(self.out_h, self.out_w, out)
    }

    /// Applies the transform to all three planes of a sample.
    pub fn apply(&self, s: &SamplePair) -> Result<SamplePair> {
        if (s.height(), s.width()) != (self.src_h, self.src_w) {
            return Err(Error::invalid(format!(
                "augment: transform built for {}x{}, sample {} is {}x{}",
                self.src_h,
                self.src_w,
                s.id,
                s.height(),
                s.width()
            )));
        }
        SamplePair::new(
            s.id.clone(),
            self.warp_image(&s.rgb)?,
            self.warp_image(&s.thm)?,
            self.warp_labels(&s.gt)?,
            s.pseudo,
        )
    }
}

/// Draws one transform from `policy` and applies it to the sample.
pub fn augment<R: Rng + ?Sized>(s: &SamplePair, rng: &mut R, policy: &AugmentPolicy) -> Result<SamplePair> {
    Transform::sample(s.height(), s.width(), policy, rng)?.apply(s)
}
