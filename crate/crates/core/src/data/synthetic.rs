//! Procedural RGB-thermal scenes with exact ground truth.
//!
//! Each 64×64 scene holds one to three targets on a cluttered background:
//! hot rectangles (class 1) and warm discs (class 2). Targets always show up
//! in the thermal image. In daylight they are also brightly colored in RGB;
//! at night the RGB image is a dark, nearly uniform noise field.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::seed::substream;
use crate::tensor::{DType, Tensor};

pub const SCENE_SIZE: usize = 64;
pub const SYNTHETIC_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneMode {
    /// Targets visible in both modalities.
    Day,
    /// Targets visible only in thermal.
    Night,
    /// Alternating day and night scenes.
    Mixed,
}

impl FromStr for SceneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(SceneMode::Day),
            "night" => Ok(SceneMode::Night),
            "mixed" => Ok(SceneMode::Mixed),
            other => Err(Error::invalid(format!("unknown synthetic mode {other:?} (day, night, mixed)"))),
        }
    }
}

impl fmt::Display for SceneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneMode::Day => "day",
            SceneMode::Night => "night",
            SceneMode::Mixed => "mixed",
        })
    }
}

const THM_BACKGROUND: f64 = 0.25;
const THM_CLASS: [f64; 3] = [THM_BACKGROUND, 0.85, 0.6];
const RGB_BACKGROUND: [f64; 3] = [0.15, 0.15, 0.15];
const RGB_CLASS: [[f64; 3]; 3] = [RGB_BACKGROUND, [0.9, 0.3, 0.2], [0.2, 0.8, 0.9]];
const NIGHT_RGB: f64 = 0.1;

fn paint_targets<R: Rng + ?Sized>(rng: &mut R, labels: &mut [u8]) {
    let s = SCENE_SIZE as i64;
    for _ in 0..rng.random_range(1..=3) {
        if rng.random_bool(0.5) {
            let (h, w) = (rng.random_range(12..=26), rng.random_range(12..=26));
            let (y0, x0) = (rng.random_range(0..=s - h), rng.random_range(0..=s - w));
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    labels[(y * s + x) as usize] = 1;
                }
            }
        } else {
            let r = rng.random_range(6.0..12.0f64);
            let cy = rng.random_range(r..s as f64 - r);
            let cx = rng.random_range(r..s as f64 - r);
            for y in 0..s {
                for x in 0..s {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        labels[(y * s + x) as usize] = 2;
                    }
                }
            }
        }
    }
}

/// One scene; randomness comes only from `rng`.
pub fn make_scene<R: Rng + ?Sized>(id: String, day: bool, rng: &mut R) -> Result<SamplePair> {
    let n = SCENE_SIZE * SCENE_SIZE;
    let mut labels = vec![0u8; n];
    paint_targets(rng, &mut labels);

    let tilt = rng.random_range(-0.05..0.05);
    let thm: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let y = (i / SCENE_SIZE) as f64 / SCENE_SIZE as f64;
            let base = THM_CLASS[c as usize] + rng.random_range(-0.03..0.03);
            let drift = if c == 0 { tilt * y } else { 0.0 };
            (base + drift).clamp(0.0, 1.0)
        })
        .collect();

    let mut rgb = vec![0.0; 3 * n];
    for (i, &c) in labels.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch * n + i] = if day {
                RGB_CLASS[c as usize][ch] + rng.random_range(-0.02..0.02)
            } else {
                NIGHT_RGB + rng.random_range(-0.04..0.04)
            };
        }
    }
    SamplePair::new(
        id,
        Tensor::with_dtype(&[3, SCENE_SIZE, SCENE_SIZE], rgb, DType::F32)?,
        Tensor::with_dtype(&[1, SCENE_SIZE, SCENE_SIZE], thm, DType::F32)?,
        LabelMap::new(SCENE_SIZE, SCENE_SIZE, labels)?,
        None,
    )
}

/// `n` scenes named `<mode>_<index>`, each drawn from its own sub-stream of `seed`.
pub fn make_synthetic_dataset(n: usize, seed: u64, mode: SceneMode) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::invalid("make_synthetic_dataset: n must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let id = format!("{mode}_{i:04}");
            let day = match mode {
                SceneMode::Day => true,
                SceneMode::Night => false,
                SceneMode::Mixed => i % 2 == 0,
            };
            let mut rng = substream(seed, &format!("synthetic/{id}"));
            make_scene(id, day, &mut rng)
        })
        .collect()
}
