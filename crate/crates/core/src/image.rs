//! `ImageTensor`: an H×W×3 array of intensities in [0, 255].

use std::path::Path;

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAX_INTENSITY: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    /// Validates shape (H, W ≥ 1, 3 channels) and range [0, 255].
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "image must be H×W×3 with H, W ≥ 1, got {h}×{w}×{c}"
            )));
        }
        if let Some(v) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > MAX_INTENSITY)
        {
            return Err(Error::Data(format!(
                "pixel value {v} outside [0, 255]"
            )));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from `f(y, x, c)`, clamping into range.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            clamp_intensity(f(y, x, c))
        });
        Self { pixels }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    /// Clamps every value into [0, 255] (NaN becomes 0).
    pub fn from_unclamped(mut pixels: Array3<f64>) -> Result<Self> {
        pixels.mapv_inplace(clamp_intensity);
        Self::new(pixels)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixel_count(&self) -> usize {
        self.height() * self.width()
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[[y, x, c]]
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// Rounds every value to the nearest integer intensity.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| v.round()),
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.pixels.dim(), other.pixels.dim());
        let n = self.pixels.len() as f64;
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.pixels.dim(), other.pixels.dim());
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// SHA-256 over dimensions and the exact f64 bit patterns.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height() as u64).to_le_bytes());
        hasher.update((self.width() as u64).to_le_bytes());
        for v in self.pixels.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let (h0, w0) = (self.height(), self.width());
        let sy = h0 as f64 / height as f64;
        let sx = w0 as f64 / width as f64;
        let src = &self.pixels;
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h0 - 1), (x0 + 1).min(w0 - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let top = src[[y0, x0, c]] * (1.0 - tx) + src[[y0, x1, c]] * tx;
            let bottom = src[[y1, x0, c]] * (1.0 - tx) + src[[y1, x1, c]] * tx;
            clamp_intensity(top * (1.0 - ty) + bottom * ty)
        });
        Self { pixels }
    }

    /// Crops the `size_y × size_x` window at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, size_y: usize, size_x: usize) -> Result<Self> {
        if size_y == 0 || size_x == 0 || top + size_y > self.height() || left + size_x > self.width()
        {
            return Err(Error::Shape(format!(
                "crop {size_y}×{size_x} at ({top}, {left}) exceeds {}×{} image",
                self.height(),
                self.width()
            )));
        }
        let pixels = self
            .pixels
            .slice(ndarray::s![top..top + size_y, left..left + size_x, ..])
            .to_owned();
        Ok(Self { pixels })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64
        });
        Self::new(pixels)
    }

    /// Writes an 8-bit RGB PNG (values rounded).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = self.pixels[[y as usize, x as usize, c]].round() as u8;
            }
        }
        buf.save(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn clamp_intensity(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, MAX_INTENSITY)
    }
}
