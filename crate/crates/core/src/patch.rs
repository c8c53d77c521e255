//! The universal sample unit: a small RGB image with values in [0, 1].

use ndarray::Array3;
use std::path::Path;

use crate::error::{RestoreError, Result};

/// An RGB image patch stored channel-first (3, height, width) with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    /// Pixel data, shape (3, h, w).
    pub data: Array3<f64>,
    /// Identifier, e.g. the file stem the patch came from.
    pub id: String,
}

impl ImagePatch {
    /// Wrap raw channel-first data. Dimensions must be at least 8x8.
    pub fn new(data: Array3<f64>, id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(RestoreError::ShapeMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        if h < 8 || w < 8 {
            return Err(RestoreError::InvalidInput(format!(
                "patch must be at least 8x8, got {h}x{w}"
            )));
        }
        Ok(Self { data, id: id.into() })
    }

    /// A patch filled with one value.
    pub fn constant(h: usize, w: usize, value: f64, id: &str) -> Result<Self> {
        Self::new(Array3::from_elem((3, h, w), value), id)
    }

    /// A deterministic natural-looking test image: smooth gradients plus
    /// sinusoidal texture, phase-shifted per channel by `variant`.
    pub fn synthetic(h: usize, w: usize, variant: u64) -> Self {
        let p = variant as f64 * 0.7;
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            let (xf, yf) = (x as f64, y as f64);
            let ch = c as f64;
            let v = 0.5
                + 0.21 * ((xf / 6.1 + p + ch).sin())
                + 0.17 * ((yf / 4.3 - 0.5 * p + 0.7 * ch).cos())
                + 0.09 * (((xf + 2.0 * yf) / 3.7 + 1.3 * ch * p).sin())
                + 0.06 * ((xf * yf / 53.0 + ch).cos());
            v.clamp(0.0, 1.0)
        });
        Self { data, id: format!("synthetic_{variant}_{h}x{w}") }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Clamp every value into [0, 1] in place.
    pub fn clamp(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// True if every value lies in [0, 1].
    pub fn in_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Convert to 8-bit RGB, rounding. Values are clamped first.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (_, h, w) = self.data.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgb([
                    quantize(self.data[[0, y, x]]),
                    quantize(self.data[[1, y, x]]),
                    quantize(self.data[[2, y, x]]),
                ]);
                img.put_pixel(x as u32, y as u32, px);
            }
        }
        img
    }

    /// Build a patch from 8-bit RGB data.
    pub fn from_rgb8(img: &image::RgbImage, id: impl Into<String>) -> Result<Self> {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x, y);
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
                }
            }
        }
        Self::new(data, id)
    }

    /// Round-trip through 8-bit quantization (what PNG storage does).
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.data.mapv_inplace(|v| quantize(v) as f64 / 255.0);
        out
    }

    /// Write as 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Read an 8-bit PNG (or any decodable image) as a patch.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_rgb8(&img, id)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_patches() {
        let r = ImagePatch::new(Array3::zeros((3, 4, 64)), "t");
        assert!(matches!(r, Err(RestoreError::InvalidInput(_))));
    }

    #[test]
    fn quantize_round_trip_is_stable() {
        let mut p = ImagePatch::constant(8, 8, 0.0, "t").unwrap();
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.137).fract();
        }
        let q = p.quantized();
        assert_eq!(q.quantized().data, q.data);
    }
}
