//! Dataset directories and 8-bit PNG images.
//!
//! Layout: `root/<split>.txt` lists sample ids one per line, and each id has
//! `root/rgb/<id>.png` (3-channel), `root/thm/<id>.png` (1-channel) and
//! `root/labels/<id>.png` (class indices as gray values).
//!
//! MFNet ships 4-channel images with RGB and thermal stacked; split them into
//! `rgb/` and `thm/` first, keeping the label and split files as they are.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use super::{LabelMap, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn to_unit(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

/// [3, H, W] in [0, 1] from an 8-bit PNG.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = read_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut planar = Vec::with_capacity(raw.len());
    for ch in 0..3 {
        planar.extend(raw.iter().skip(ch).step_by(3).map(|&b| b as f64 / 255.0));
    }
    Tensor::with_dtype(&[3, h, w], planar, DType::F32)
}

/// [1, H, W] in [0, 1] from an 8-bit PNG (color images are converted to luma).
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = read_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::with_dtype(&[1, h, w], to_unit(img.as_raw()), DType::F32)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = read_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Writes an 8-bit grayscale PNG, creating parent directories.
pub fn write_gray_png(path: &Path, h: usize, w: usize, bytes: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    let img = GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::invalid(format!("write_gray_png: buffer does not fit {h}x{w}")))?;
    img.save(path).map_err(save_err(path))
}

/// Writes a [3, H, W] tensor with values in [0, 1] as an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("write_rgb", format!("expected [3,H,W], got {s:?}"))),
    };
    let n = h * w;
    let v = t.values();
    let interleaved: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |ch| quantize(v[ch * n + i]))).collect();
    ensure_parent(path)?;
    let img = RgbImage::from_raw(w as u32, h as u32, interleaved).expect("sized above");
    img.save(path).map_err(save_err(path))
}

/// Writes a [1, H, W] or [H, W] tensor with values in [0, 1] as an 8-bit PNG.
pub fn write_gray(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(Error::shape("write_gray", format!("expected [1,H,W], got {s:?}"))),
    };
    write_gray_png(path, h, w, t.values().iter().map(|&v| quantize(v)).collect())
}

pub fn write_labels(path: &Path, y: &LabelMap) -> Result<()> {
    write_gray_png(path, y.height(), y.width(), y.values().to_vec())
}

pub fn rgb_path(root: &Path, id: &str) -> PathBuf {
    root.join("rgb").join(format!("{id}.png"))
}

pub fn thm_path(root: &Path, id: &str) -> PathBuf {
    root.join("thm").join(format!("{id}.png"))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.png"))
}

/// Ids listed in `root/<split>.txt`, sorted, blank lines skipped.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<String>> {
    let path = root.join(format!("{split}.txt"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn load_sample(root: &Path, id: &str) -> Result<SamplePair> {
    let tag = |e: Error| match e {
        Error::Sample { .. } => e,
        other => Error::Sample {
            id: id.to_string(),
            msg: other.to_string(),
        },
    };
    let rgb = read_rgb(&rgb_path(root, id)).map_err(tag)?;
    let thm = read_gray(&thm_path(root, id)).map_err(tag)?;
    let gt = read_labels(&label_path(root, id)).map_err(tag)?;
    SamplePair::new(id, rgb, thm, gt, None)
}

/// Every sample of a split, ordered by id.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<SamplePair>> {
    read_split(root, split)?.iter().map(|id| load_sample(root, id)).collect()
}

/// Writes samples in the layout [`load_dataset`] reads, plus the split file.
pub fn save_dataset(root: &Path, split: &str, samples: &[SamplePair]) -> Result<()> {
    for s in samples {
        write_rgb(&rgb_path(root, &s.id), &s.rgb)?;
        write_gray(&thm_path(root, &s.id), &s.thm)?;
        write_labels(&label_path(root, &s.id), &s.gt)?;
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let list: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
    let path = root.join(format!("{split}.txt"));
    fs::write(&path, list).map_err(|e| Error::io(&path, e))
}
