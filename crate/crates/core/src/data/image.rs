//! `H × W × C` image tensors and their binary file format.
//!
//! File layout: magic `MKGI`, then `H`, `W`, `C` as little-endian `u32`, then
//! `H·W·C` little-endian `f32` values in row-major `(h, w, c)` order.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"MKGI";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f64) {
        self.data[(h * self.width + w) * self.channels + c] = v;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        for dim in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
            return Err(Error::Format("missing MKGI image header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Format(format!(
                "image {h}x{w}x{c} needs {} payload bytes, found {}",
                4 * n,
                bytes.len() - 16
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Pads or truncates to exactly `count` images: extra images are dropped,
/// missing ones repeat the last image, and an empty list becomes zero images.
pub fn fit_image_count(mut images: Vec<ImageTensor>, count: usize, dims: (usize, usize, usize)) -> Vec<ImageTensor> {
    images.truncate(count);
    let fill = images
        .last()
        .cloned()
        .unwrap_or_else(|| ImageTensor::zeros(dims.0, dims.1, dims.2));
    while images.len() < count {
        images.push(fill.clone());
    }
    images
}
