#![allow(dead_code)]

use histocon::encoder::EncoderConfig;
use histocon::pairs::{build_pair_sets, PairSets};
use histocon::rng::Rng;
use ndarray::{Array1, Array2};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Central differences of `f` over every entry of `z`.
pub fn numeric_grad_z(z: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(z.raw_dim());
    let mut work = z.clone();
    for idx in ndarray::indices(z.dim()) {
        let x = z[idx];
        work[idx] = x + FD_STEP;
        let up = f(&work);
        work[idx] = x - FD_STEP;
        let down = f(&work);
        work[idx] = x;
        g[idx] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

pub fn random_unit_rows(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    let mut z: Array2<f64> = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
    for mut row in z.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    z
}

/// `n/2` sources, two views each (rows `[view₁…, view₂…]`), random binary labels.
pub fn random_views(n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>, PairSets) {
    let sources = n / 2;
    let source_labels: Vec<usize> = (0..sources).map(|_| rng.gen_range(0..2)).collect();
    let source_index: Vec<usize> = (0..sources).chain(0..sources).collect();
    let labels: Vec<usize> = source_index.iter().map(|&s| source_labels[s]).collect();
    let pairs = build_pair_sets(&labels, &source_index).unwrap();
    (labels, source_index, pairs)
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: 8,
        channels: vec![3, 4, 5],
        embed_dim: 8,
    }
}

pub fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

pub fn to_vec(a: &Array1<f64>) -> Vec<f64> {
    a.to_vec()
}
