//! Beer–Lambert optical density, sparse NMF stain estimation and HED
//! augmentation.
//!
//! Optical density is `V = ln(255 / I)` with intensities clamped to [1, 255].
//! Stains are estimated by minimizing
//!
//! ```text
//! ½‖V − WH‖²_F + λ Σ_j ‖H(j,:)‖₁   s.t.  W, H ≥ 0,  ‖W(:,j)‖₂ = 1
//! ```
//!
//! by alternating a multiplicative ℓ1-shrunk update on `H` with a projected
//! gradient step on `W` (backtracking, then column renormalization). Both
//! half-steps are accepted only if the objective does not increase, so the
//! recorded objective trace is monotone.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_intensity, ImageTensor, MAX_INTENSITY};

/// Ruifrok–Johnston hematoxylin optical-density direction (unnormalized).
pub const REFERENCE_HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
/// Ruifrok–Johnston eosin optical-density direction (unnormalized).
pub const REFERENCE_EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

/// Bounds of the additive brightness term, as a fraction of full scale.
const BRIGHTNESS_FRACTION: f64 = 0.05;

/// Reference H&E basis as a 3×2 matrix with unit columns.
pub fn reference_basis() -> Array2<f64> {
    let mut w = Array2::zeros((3, 2));
    for (j, v) in [REFERENCE_HEMATOXYLIN, REFERENCE_EOSIN].iter().enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in 0..3 {
            w[[c, j]] = v[c] / norm;
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpticalDensity {
    values: Array2<f64>,
    height: usize,
    width: usize,
}

impl OpticalDensity {
    pub fn new(values: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if values.nrows() != 3 || values.ncols() != height * width || values.ncols() == 0 {
            return Err(Error::Shape(format!(
                "optical density must be 3×{} for a {height}×{width} image, got {:?}",
                height * width,
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("optical density entries must be finite and ≥ 0".into()));
        }
        Ok(Self {
            values,
            height,
            width,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StainConfig {
    /// ℓ1 weight on the concentration matrix.
    pub sparsity_weight: f64,
    pub max_iterations: usize,
    /// Relative Frobenius change of `WH` below which the solver stops.
    pub tolerance: f64,
    pub rng_seed: u64,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self {
            sparsity_weight: 0.1,
            max_iterations: 200,
            tolerance: 1e-6,
            rng_seed: 0,
        }
    }
}

impl StainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity_weight >= 0.0) || !self.sparsity_weight.is_finite() {
            return Err(Error::Config("stain.sparsity_weight must be ≥ 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("stain.max_iterations must be ≥ 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("stain.tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// `W` (3×2, unit non-negative columns) and `H` (2×n, non-negative).
#[derive(Debug, Clone, PartialEq)]
pub struct StainModel {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    height: usize,
    width: usize,
}

impl StainModel {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `W` flattened row-major (6 values), the auxiliary-head target layout.
    pub fn w_row_major(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for c in 0..3 {
            for j in 0..2 {
                out[c * 2 + j] = self.w[[c, j]];
            }
        }
        out
    }

    pub fn reconstruct_od(&self) -> OpticalDensity {
        OpticalDensity {
            values: self.w.dot(&self.h),
            height: self.height,
            width: self.width,
        }
    }

    pub fn reconstruct(&self) -> ImageTensor {
        od_to_rgb(&self.reconstruct_od())
    }

    /// RGB rendering of a single stain (`0` hematoxylin, `1` eosin).
    pub fn stain_image(&self, stain: usize) -> ImageTensor {
        assert!(stain < 2);
        let n = self.h.ncols();
        let values = Array2::from_shape_fn((3, n), |(c, p)| self.w[[c, stain]] * self.h[[stain, p]]);
        od_to_rgb(&OpticalDensity {
            values,
            height: self.height,
            width: self.width,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StainFit {
    pub model: StainModel,
    /// Objective after initialization, then after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl StainFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

pub fn rgb_to_od(image: &ImageTensor) -> OpticalDensity {
    let (h, w) = (image.height(), image.width());
    let px = image.pixels();
    let values = Array2::from_shape_fn((3, h * w), |(c, p)| {
        let v = px[[p / w, p % w, c]].clamp(1.0, MAX_INTENSITY);
        (MAX_INTENSITY / v).ln()
    });
    OpticalDensity {
        values,
        height: h,
        width: w,
    }
}

pub fn od_to_rgb(od: &OpticalDensity) -> ImageTensor {
    let w = od.width;
    let pixels = Array3::from_shape_fn((od.height, od.width, 3), |(y, x, c)| {
        clamp_intensity(MAX_INTENSITY * (-od.values[[c, y * w + x]]).exp())
    });
    ImageTensor::new(pixels).expect("clamped intensities are valid")
}

/// Sparse NMF objective `½‖V − WH‖²_F + λ‖H‖₁`.
pub fn stain_objective(v: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>, lambda: f64) -> f64 {
    let n = v.ncols();
    let mut sq = 0.0;
    let mut l1 = 0.0;
    for p in 0..n {
        let (h0, h1) = (h[[0, p]], h[[1, p]]);
        l1 += h0.abs() + h1.abs();
        for c in 0..3 {
            let r = v[[c, p]] - w[[c, 0]] * h0 - w[[c, 1]] * h1;
            sq += r * r;
        }
    }
    0.5 * sq + lambda * l1
}

/// Per-column non-negative least squares for a two-column basis.
fn nnls_init(v: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let n = v.ncols();
    let g00: f64 = (0..3).map(|c| w[[c, 0]] * w[[c, 0]]).sum();
    let g11: f64 = (0..3).map(|c| w[[c, 1]] * w[[c, 1]]).sum();
    let g01: f64 = (0..3).map(|c| w[[c, 0]] * w[[c, 1]]).sum();
    let det = g00 * g11 - g01 * g01;
    let mut h = Array2::zeros((2, n));
    let resid = |p: usize, a: f64, b: f64| -> f64 {
        (0..3)
            .map(|c| {
                let r = v[[c, p]] - w[[c, 0]] * a - w[[c, 1]] * b;
                r * r
            })
            .sum()
    };
    for p in 0..n {
        let b0: f64 = (0..3).map(|c| w[[c, 0]] * v[[c, p]]).sum();
        let b1: f64 = (0..3).map(|c| w[[c, 1]] * v[[c, p]]).sum();
        let (a, b) = if det.abs() > 1e-12 {
            ((g11 * b0 - g01 * b1) / det, (g00 * b1 - g01 * b0) / det)
        } else {
            (-1.0, -1.0)
        };
        let best = if a >= 0.0 && b >= 0.0 {
            (a, b)
        } else {
            let only0 = ((b0 / g00).max(0.0), 0.0);
            let only1 = (0.0, (b1 / g11).max(0.0));
            if resid(p, only0.0, only0.1) <= resid(p, only1.0, only1.1) {
                only0
            } else {
                only1
            }
        };
        h[[0, p]] = best.0;
        h[[1, p]] = best.1;
    }
    h
}

/// Projects onto the constraint set: clamp at zero, then unit columns.
/// A column that collapses to zero keeps its previous direction.
fn project_basis(candidate: &mut Array2<f64>, previous: &Array2<f64>) {
    for j in 0..2 {
        for c in 0..3 {
            if candidate[[c, j]] < 0.0 {
                candidate[[c, j]] = 0.0;
            }
        }
        let norm = (0..3).map(|c| candidate[[c, j]].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for c in 0..3 {
                candidate[[c, j]] /= norm;
            }
        } else {
            for c in 0..3 {
                candidate[[c, j]] = previous[[c, j]];
            }
        }
    }
}

fn reconstruction_change(w0: &Array2<f64>, h0: &Array2<f64>, w1: &Array2<f64>, h1: &Array2<f64>) -> f64 {
    let n = h0.ncols();
    let mut diff = 0.0;
    let mut base = 0.0;
    for p in 0..n {
        for c in 0..3 {
            let a = w0[[c, 0]] * h0[[0, p]] + w0[[c, 1]] * h0[[1, p]];
            let b = w1[[c, 0]] * h1[[0, p]] + w1[[c, 1]] * h1[[1, p]];
            diff += (a - b).powi(2);
            base += a * a;
        }
    }
    if base == 0.0 {
        0.0
    } else {
        (diff / base).sqrt()
    }
}

pub fn estimate_stains(od: &OpticalDensity, cfg: &StainConfig) -> Result<StainFit> {
    cfg.validate()?;
    let v = &od.values;
    let n = v.ncols();
    if n < 2 {
        return Err(Error::Shape(format!(
            "stain estimation needs at least 2 pixels, got {n}"
        )));
    }
    if v.iter().all(|x| *x <= 1e-12) {
        return Err(Error::BlankImage);
    }
    let lambda = cfg.sparsity_weight;
    let mut w = reference_basis();
    let mut h = nnls_init(v, &w);
    let mut f = stain_objective(v, &w, &h, lambda);
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let (w_prev, h_prev) = (w.clone(), h.clone());

        // Concentrations: H ← H ⊙ WᵀV / (WᵀWH + λ).
        let wtw = w.t().dot(&w);
        let mut h_new = h.clone();
        for p in 0..n {
            let (h0, h1) = (h[[0, p]], h[[1, p]]);
            for k in 0..2 {
                let num: f64 = (0..3).map(|c| w[[c, k]] * v[[c, p]]).sum();
                let den = wtw[[k, 0]] * h0 + wtw[[k, 1]] * h1 + lambda;
                h_new[[k, p]] = if den > 0.0 { h[[k, p]] * num / den } else { 0.0 };
            }
        }
        let f_h = stain_objective(v, &w, &h_new, lambda);
        if f_h <= f {
            h = h_new;
            f = f_h;
        }

        // Basis: backtracking projected gradient on the unit-column set.
        let resid = v - &w.dot(&h);
        let grad = -resid.dot(&h.t());
        let hht = h.dot(&h.t());
        let lipschitz = hht.iter().map(|x| x.abs()).sum::<f64>().max(1e-12);
        let mut step = 1.0 / lipschitz;
        for _ in 0..12 {
            let mut candidate = &w - &(&grad * step);
            project_basis(&mut candidate, &w);
            let f_w = stain_objective(v, &candidate, &h, lambda);
            if f_w <= f {
                w = candidate;
                f = f_w;
                break;
            }
            step *= 0.5;
        }

        trace.push(f);
        if reconstruction_change(&w_prev, &h_prev, &w, &h) < cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut model = StainModel {
        w,
        h,
        height: od.height,
        width: od.width,
    };
    canonicalize(&mut model);
    Ok(StainFit {
        model,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Orders stains so column 0 is the one closer (cosine) to reference hematoxylin.
fn canonicalize(model: &mut StainModel) {
    let reference = reference_basis();
    let cos = |j: usize| -> f64 { (0..3).map(|c| model.w[[c, j]] * reference[[c, 0]]).sum() };
    if cos(1) > cos(0) {
        for c in 0..3 {
            model.w.swap([c, 0], [c, 1]);
        }
        for p in 0..model.h.ncols() {
            model.h.swap([0, p], [1, p]);
        }
    }
}

/// Affine brightness/contrast law `a·x + b` applied to one stain channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainPerturbation {
    pub contrast: f64,
    pub brightness: f64,
}

impl StainPerturbation {
    pub const IDENTITY: Self = Self {
        contrast: 1.0,
        brightness: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(strength: f64, rng: &mut R) -> Self {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        Self {
            contrast: 1.0 + strength * (2.0 * u - 1.0),
            brightness: strength * MAX_INTENSITY * BRIGHTNESS_FRACTION * (2.0 * v - 1.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

#[derive(Debug, Clone)]
pub struct HedOutcome {
    pub image: ImageTensor,
    /// Stain model of the input image.
    pub model: StainModel,
    /// Hematoxylin then eosin.
    pub perturbations: [StainPerturbation; 2],
}

pub fn hed_augment<R: Rng + ?Sized>(
    image: &ImageTensor,
    cfg: &StainConfig,
    strength: f64,
    rng: &mut R,
) -> Result<ImageTensor> {
    hed_augment_detailed(image, cfg, strength, rng).map(|o| o.image)
}

pub fn hed_augment_detailed<R: Rng + ?Sized>(
    image: &ImageTensor,
    cfg: &StainConfig,
    strength: f64,
    rng: &mut R,
) -> Result<HedOutcome> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!(
            "HED strength must lie in [0, 1], got {strength}"
        )));
    }
    let fit = estimate_stains(&rgb_to_od(image), cfg)?;
    let perturbations = [
        StainPerturbation::sample(strength, rng),
        StainPerturbation::sample(strength, rng),
    ];
    log::trace!("hed perturbations {perturbations:?}");
    let mut h = fit.model.h.clone();
    for (s, pert) in perturbations.iter().enumerate() {
        if pert.is_identity() {
            continue;
        }
        for p in 0..h.ncols() {
            let channel = MAX_INTENSITY * (-h[[s, p]]).exp();
            let moved = (pert.contrast * channel + pert.brightness).clamp(1.0, MAX_INTENSITY);
            h[[s, p]] = (MAX_INTENSITY / moved).ln();
        }
    }
    let perturbed = StainModel {
        h,
        ..fit.model.clone()
    };
    Ok(HedOutcome {
        image: perturbed.reconstruct(),
        model: fit.model,
        perturbations,
    })
}
