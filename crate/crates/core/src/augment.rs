//! Probability-gated augmentation pipeline used to build positive-pair views.
//!
//! Steps run in a fixed order (crop, jitter, blur, geometric, HED); each fires
//! independently with its own probability. The output always keeps the input
//! dimensions and the [0, 255] range.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_intensity, ImageTensor};
use crate::rng::Rng as ChaRng;
use crate::stain::{hed_augment, StainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometricOp {
    Hflip,
    Vflip,
    Rot90,
    Rot180,
    Rot270,
}

impl GeometricOp {
    pub const ALL: [GeometricOp; 5] = [
        GeometricOp::Hflip,
        GeometricOp::Vflip,
        GeometricOp::Rot90,
        GeometricOp::Rot180,
        GeometricOp::Rot270,
    ];

    fn swaps_axes(self) -> bool {
        matches!(self, GeometricOp::Rot90 | GeometricOp::Rot270)
    }

    pub fn apply(self, image: &ImageTensor) -> ImageTensor {
        let (h, w) = (image.height(), image.width());
        let src = image.pixels();
        let dims = if self.swaps_axes() { (w, h, 3) } else { (h, w, 3) };
        let pixels = Array3::from_shape_fn(dims, |(y, x, c)| match self {
            GeometricOp::Hflip => src[[y, w - 1 - x, c]],
            GeometricOp::Vflip => src[[h - 1 - y, x, c]],
            GeometricOp::Rot180 => src[[h - 1 - y, w - 1 - x, c]],
            // counter-clockwise quarter turn
            GeometricOp::Rot90 => src[[x, w - 1 - y, c]],
            GeometricOp::Rot270 => src[[h - 1 - x, y, c]],
        });
        ImageTensor::new(pixels).expect("permutation preserves validity")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// Random square-aspect crop covering `U(scale_min, scale_max)` of the
    /// area, resized back to the input size.
    Crop { scale_min: f64, scale_max: f64 },
    /// Brightness, contrast and saturation factors drawn from `U(1 − r, 1 + r)`.
    Jitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    /// Gaussian blur with `σ ~ U(sigma_min, sigma_max)`; kernel side is
    /// `kernel_fraction` of the shorter image side rounded up to odd (≥ 3).
    Blur {
        sigma_min: f64,
        sigma_max: f64,
        kernel_fraction: f64,
    },
    /// One of `ops`, uniformly. Quarter turns are skipped on non-square images.
    Geometric { ops: Vec<GeometricOp> },
    Hed { strength: f64, stain: StainConfig },
}

impl Transform {
    pub fn id(&self) -> &'static str {
        match self {
            Transform::Crop { .. } => "crop",
            Transform::Jitter { .. } => "jitter",
            Transform::Blur { .. } => "blur",
            Transform::Geometric { .. } => "geometric",
            Transform::Hed { .. } => "hed",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            Transform::Crop {
                scale_min,
                scale_max,
            } => {
                if !(*scale_min > 0.0 && scale_min <= scale_max) {
                    return bad(format!("crop scale range [{scale_min}, {scale_max}] is empty or non-positive"));
                }
                if *scale_max > 1.0 {
                    return bad(format!("crop scale {scale_max} exceeds the image (max 1.0)"));
                }
            }
            Transform::Jitter {
                brightness,
                contrast,
                saturation,
            } => {
                for (name, r) in [("brightness", brightness), ("contrast", contrast), ("saturation", saturation)] {
                    if !(0.0..1.0).contains(r) {
                        return bad(format!("jitter {name} range {r} must lie in [0, 1)"));
                    }
                }
            }
            Transform::Blur {
                sigma_min,
                sigma_max,
                kernel_fraction,
            } => {
                if !(*sigma_min > 0.0 && sigma_min <= sigma_max) {
                    return bad(format!("blur sigma range [{sigma_min}, {sigma_max}] invalid"));
                }
                if !(*kernel_fraction > 0.0 && *kernel_fraction <= 1.0) {
                    return bad(format!("blur kernel fraction {kernel_fraction} must lie in (0, 1]"));
                }
            }
            Transform::Geometric { ops } => {
                if ops.is_empty() {
                    return bad("geometric transform needs at least one op".into());
                }
            }
            Transform::Hed { strength, stain } => {
                if !(0.0..=1.0).contains(strength) {
                    return bad(format!("hed strength {strength} must lie in [0, 1]"));
                }
                stain.validate()?;
            }
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &ImageTensor, rng: &mut R) -> Result<ImageTensor> {
        match self {
            Transform::Crop {
                scale_min,
                scale_max,
            } => {
                let (h, w) = (image.height(), image.width());
                let scale = uniform(rng, *scale_min, *scale_max).sqrt();
                let sy = ((h as f64 * scale).round() as usize).clamp(1, h);
                let sx = ((w as f64 * scale).round() as usize).clamp(1, w);
                let top = rng.gen_range(0..=h - sy);
                let left = rng.gen_range(0..=w - sx);
                Ok(image.crop(top, left, sy, sx)?.resize_bilinear(h, w))
            }
            Transform::Jitter {
                brightness,
                contrast,
                saturation,
            } => {
                let fb = uniform(rng, 1.0 - brightness, 1.0 + brightness);
                let fc = uniform(rng, 1.0 - contrast, 1.0 + contrast);
                let fs = uniform(rng, 1.0 - saturation, 1.0 + saturation);
                Ok(color_jitter(image, fb, fc, fs))
            }
            Transform::Blur {
                sigma_min,
                sigma_max,
                kernel_fraction,
            } => {
                let sigma = uniform(rng, *sigma_min, *sigma_max);
                let side = image.height().min(image.width()) as f64;
                let mut k = ((side * kernel_fraction).round() as usize).max(3);
                if k % 2 == 0 {
                    k += 1;
                }
                Ok(gaussian_blur(image, sigma, k))
            }
            Transform::Geometric { ops } => {
                let square = image.height() == image.width();
                let allowed: Vec<GeometricOp> =
                    ops.iter().copied().filter(|op| square || !op.swaps_axes()).collect();
                match allowed.choose(rng) {
                    Some(op) => Ok(op.apply(image)),
                    None => Ok(image.clone()),
                }
            }
            Transform::Hed { strength, stain } => match hed_augment(image, stain, *strength, rng) {
                Ok(out) => Ok(out),
                // A view cropped onto pure background has no stain to perturb.
                Err(Error::BlankImage) => Ok(image.clone()),
                Err(e) => Err(e),
            },
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    lo + (hi - lo) * u
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn color_jitter(image: &ImageTensor, brightness: f64, contrast: f64, saturation: f64) -> ImageTensor {
    let mut px = image.pixels().mapv(|v| clamp_intensity(v * brightness));
    let (h, w, _) = px.dim();
    let mut mean_gray = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean_gray += luminance(px[[y, x, 0]], px[[y, x, 1]], px[[y, x, 2]]);
        }
    }
    mean_gray /= (h * w) as f64;
    px.mapv_inplace(|v| clamp_intensity((v - mean_gray) * contrast + mean_gray));
    for y in 0..h {
        for x in 0..w {
            let gray = luminance(px[[y, x, 0]], px[[y, x, 1]], px[[y, x, 2]]);
            for c in 0..3 {
                px[[y, x, c]] = clamp_intensity(gray + (px[[y, x, c]] - gray) * saturation);
            }
        }
    }
    ImageTensor::new(px).expect("clamped")
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64, kernel_size: usize) -> ImageTensor {
    let radius = (kernel_size / 2) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (image.height() as isize, image.width() as isize);
    let src = image.pixels();
    let horizontal = Array3::from_shape_fn(src.dim(), |(y, x, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let xx = (x as isize + i as isize - radius).clamp(0, w - 1) as usize;
                k * src[[y, xx, c]]
            })
            .sum::<f64>()
    });
    let out = Array3::from_shape_fn(src.dim(), |(y, x, c)| {
        clamp_intensity(
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let yy = (y as isize + i as isize - radius).clamp(0, h - 1) as usize;
                    k * horizontal[[yy, x, c]]
                })
                .sum::<f64>(),
        )
    });
    ImageTensor::new(out).expect("clamped")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentStep {
    pub transform: Transform,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPipeline {
    steps: Vec<AugmentStep>,
}

impl AugmentPipeline {
    pub fn new(steps: Vec<AugmentStep>) -> Result<Self> {
        for step in &steps {
            if !(0.0..=1.0).contains(&step.probability) {
                return Err(Error::Config(format!(
                    "{} probability {} outside [0, 1]",
                    step.transform.id(),
                    step.probability
                )));
            }
            step.transform.validate()?;
        }
        Ok(Self { steps })
    }

    pub fn identity() -> Self {
        Self { steps: Vec::new() }
    }

    pub fn steps(&self) -> &[AugmentStep] {
        &self.steps
    }

    /// Same pipeline without the HED step.
    pub fn without_hed(&self) -> Self {
        Self {
            steps: self
                .steps
                .iter()
                .filter(|s| !matches!(s.transform, Transform::Hed { .. }))
                .cloned()
                .collect(),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &ImageTensor, rng: &mut R) -> Result<ImageTensor> {
        let mut current = image.clone();
        for step in &self.steps {
            let draw: f64 = rng.gen();
            if draw < step.probability {
                current = step.transform.apply(&current, rng)?;
            }
        }
        debug_assert_eq!((current.height(), current.width()), (image.height(), image.width()));
        Ok(current)
    }

    /// Two views drawn from independent sub-streams of `rng`.
    pub fn positive_pair<R: Rng + ?Sized>(
        &self,
        image: &ImageTensor,
        rng: &mut R,
    ) -> Result<(ImageTensor, ImageTensor)> {
        let mut first = ChaRng::seed_from_u64(rng.gen());
        let mut second = ChaRng::seed_from_u64(rng.gen());
        Ok((self.apply(image, &mut first)?, self.apply(image, &mut second)?))
    }
}

pub fn apply_pipeline<R: Rng + ?Sized>(
    pipeline: &AugmentPipeline,
    image: &ImageTensor,
    rng: &mut R,
) -> Result<ImageTensor> {
    pipeline.apply(image, rng)
}

pub fn make_positive_pair<R: Rng + ?Sized>(
    pipeline: &AugmentPipeline,
    image: &ImageTensor,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    pipeline.positive_pair(image, rng)
}

/// The `[augment]` block of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_p: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub jitter_p: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub blur_p: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub blur_kernel_fraction: f64,
    pub geometric_p: f64,
    pub geometric_ops: Vec<GeometricOp>,
    pub hed_p: f64,
    pub hed_strength: f64,
    /// Solver budget for the per-view stain fit.
    pub hed_max_iterations: usize,
    pub hed_tolerance: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_p: 0.5,
            crop_scale_min: 0.6,
            crop_scale_max: 1.0,
            jitter_p: 0.5,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            jitter_saturation: 0.2,
            blur_p: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.5,
            blur_kernel_fraction: 0.125,
            geometric_p: 0.5,
            geometric_ops: GeometricOp::ALL.to_vec(),
            hed_p: 0.3,
            hed_strength: 0.05,
            hed_max_iterations: 25,
            hed_tolerance: 1e-4,
        }
    }
}

impl AugmentConfig {
    /// Every probability set to zero.
    pub fn disabled() -> Self {
        Self {
            crop_p: 0.0,
            jitter_p: 0.0,
            blur_p: 0.0,
            geometric_p: 0.0,
            hed_p: 0.0,
            ..Self::default()
        }
    }

    pub fn hed_stain_config(&self, base: &StainConfig) -> StainConfig {
        StainConfig {
            max_iterations: self.hed_max_iterations,
            tolerance: self.hed_tolerance,
            ..*base
        }
    }

    pub fn build(&self, stain: &StainConfig) -> Result<AugmentPipeline> {
        AugmentPipeline::new(vec![
            AugmentStep {
                transform: Transform::Crop {
                    scale_min: self.crop_scale_min,
                    scale_max: self.crop_scale_max,
                },
                probability: self.crop_p,
            },
            AugmentStep {
                transform: Transform::Jitter {
                    brightness: self.jitter_brightness,
                    contrast: self.jitter_contrast,
                    saturation: self.jitter_saturation,
                },
                probability: self.jitter_p,
            },
            AugmentStep {
                transform: Transform::Blur {
                    sigma_min: self.blur_sigma_min,
                    sigma_max: self.blur_sigma_max,
                    kernel_fraction: self.blur_kernel_fraction,
                },
                probability: self.blur_p,
            },
            AugmentStep {
                transform: Transform::Geometric {
                    ops: self.geometric_ops.clone(),
                },
                probability: self.geometric_p,
            },
            AugmentStep {
                transform: Transform::Hed {
                    strength: self.hed_strength,
                    stain: self.hed_stain_config(stain),
                },
                probability: self.hed_p,
            },
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn fixture() -> ImageTensor {
        ImageTensor::from_fn(24, 24, |y, x, c| {
            let d = ((y as f64 - 10.0).powi(2) + (x as f64 - 14.0).powi(2)).sqrt();
            let base = if d < 5.0 { [80.0, 50.0, 140.0] } else { [225.0, 160.0, 205.0] };
            base[c] + ((x * 5 + y * 11 + c) % 13) as f64
        })
    }

    #[test]
    fn zero_probability_pipeline_is_identity() {
        let img = fixture();
        let pipe = AugmentConfig::disabled().build(&StainConfig::default()).unwrap();
        let out = pipe.apply(&img, &mut seeded(1)).unwrap();
        assert_eq!(out, img);
        let (a, b) = pipe.positive_pair(&img, &mut seeded(1)).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let img = fixture();
        let pipe = AugmentPipeline::new(vec![AugmentStep {
            transform: Transform::Geometric {
                ops: vec![GeometricOp::Hflip],
            },
            probability: 1.0,
        }])
        .unwrap();
        let once = pipe.apply(&img, &mut seeded(5)).unwrap();
        assert_ne!(once, img);
        assert_eq!(pipe.apply(&once, &mut seeded(6)).unwrap(), img);
    }

    #[test]
    fn rotations_compose() {
        let img = ImageTensor::from_fn(5, 5, |y, x, c| (y * 5 + x + c * 30) as f64);
        let r90 = GeometricOp::Rot90.apply(&img);
        let r270 = GeometricOp::Rot270.apply(&r90);
        assert_eq!(r270, img);
        let twice = GeometricOp::Rot90.apply(&r90);
        assert_eq!(twice, GeometricOp::Rot180.apply(&img));
    }

    #[test]
    fn non_square_images_keep_dimensions() {
        let img = ImageTensor::from_fn(6, 10, |y, x, c| ((y * 10 + x) * 3 + c) as f64);
        let pipe = AugmentPipeline::new(vec![AugmentStep {
            transform: Transform::Geometric {
                ops: GeometricOp::ALL.to_vec(),
            },
            probability: 1.0,
        }])
        .unwrap();
        for seed in 0..20 {
            let out = pipe.apply(&img, &mut seeded(seed)).unwrap();
            assert_eq!((out.height(), out.width()), (6, 10));
        }
    }

    #[test]
    fn oversized_crop_rejected_at_construction() {
        let cfg = AugmentConfig {
            crop_scale_max: 1.5,
            ..Default::default()
        };
        assert!(matches!(cfg.build(&StainConfig::default()), Err(Error::Config(_))));
        let bad_p = AugmentConfig {
            blur_p: 1.2,
            ..Default::default()
        };
        assert!(bad_p.build(&StainConfig::default()).is_err());
    }

    #[test]
    fn default_pipeline_is_deterministic_and_seed_sensitive() {
        let img = fixture();
        let pipe = AugmentConfig::default().build(&StainConfig::default()).unwrap();
        let a = pipe.apply(&img, &mut seeded(42)).unwrap();
        let b = pipe.apply(&img, &mut seeded(42)).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let distinct = (0..8)
            .map(|s| pipe.apply(&img, &mut seeded(100 + s)).unwrap().content_hash())
            .collect::<std::collections::HashSet<_>>();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn pair_views_differ_and_are_reproducible() {
        let img = fixture();
        let pipe = AugmentConfig::default().build(&StainConfig::default()).unwrap();
        let (a, b) = pipe.positive_pair(&img, &mut seeded(9)).unwrap();
        let (c, d) = pipe.positive_pair(&img, &mut seeded(9)).unwrap();
        assert_eq!((&a, &b), (&c, &d));
        assert_ne!(a, b);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = ImageTensor::filled(8, 8, 77.0);
        let out = gaussian_blur(&img, 1.2, 5);
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn unit_jitter_is_identity() {
        let img = fixture();
        let out = color_jitter(&img, 1.0, 1.0, 1.0);
        assert!(out.max_abs_diff(&img) < 1e-9);
    }
}
