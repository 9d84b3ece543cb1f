use crate::error::{Error, Result};

/// Per-pixel class indices, row-major [H, W].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape("LabelMap", format!("{} labels for a {h}x{w} map", data.len())));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        LabelMap { h, w, data: vec![class; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Largest class index present.
    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Fraction of pixels in each class, indices `0..num_classes`.
    pub fn class_frequencies(&self, num_classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; num_classes];
        for &c in &self.data {
            if (c as usize) < num_classes {
                counts[c as usize] += 1;
            }
        }
        let n = self.data.len() as f64;
        counts.into_iter().map(|k| k as f64 / n).collect()
    }
}
