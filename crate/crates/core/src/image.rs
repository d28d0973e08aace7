//! Grayscale images on `[0, 1]` and tissue label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::data(
                "image",
                format!("{width}x{height} image cannot hold {} pixels", data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self {
            width: side,
            height: side,
            data: vec![value; side * side],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rounds to the nearest of 256 levels, as stored in 8-bit files.
    pub fn quantized(&self) -> Self {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl Tissue {
    pub const CLASSES: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::Csf => "csf",
            Tissue::Gm => "gm",
            Tissue::Wm => "wm",
        }
    }
}

/// Per-pixel labels in `{0, 1, 2, 3}` (see [`Tissue`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::data(
                "image",
                format!("{width}x{height} label map cannot hold {} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 3) {
            return Err(Error::data("image", format!("label {bad} outside {{0,1,2,3}}")));
        }
        Ok(Self { width, height, labels })
    }

    /// Foreground (any tissue) as a boolean mask.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn count(&self, t: Tissue) -> usize {
        self.labels.iter().filter(|&&l| l == t.label()).count()
    }
}
