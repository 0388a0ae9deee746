//! Flat parameter containers and the Adam optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new(tensors: Vec<ArrayD<f64>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            tensors: other
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    /// Tensor of `shape` with entries `U(−bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
    }

    pub fn tensors(&self) -> &[ArrayD<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, k: usize) -> &ArrayD<f64> {
        &self.tensors[k]
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut ArrayD<f64> {
        &mut self.tensors[k]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (k, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (k, flat);
            }
            flat -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Value at a flat index across all tensors (declaration order, row-major).
    pub fn get_flat(&self, flat: usize) -> f64 {
        let (k, i) = self.locate(flat);
        self.tensors[k].as_slice().expect("standard layout")[i]
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        let (k, i) = self.locate(flat);
        self.tensors[k].as_slice_mut().expect("standard layout")[i] = value;
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn concat(mut self, other: ParamSet) -> ParamSet {
        self.tensors.extend(other.tensors);
        self
    }

    /// Splits off the tensors from index `at` onward.
    pub fn split_off(&mut self, at: usize) -> ParamSet {
        ParamSet {
            tensors: self.tensors.split_off(at),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Self {
            cfg,
            step: 0,
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for k in 0..params.len() {
            let p = params.tensors[k].as_slice_mut().expect("standard layout");
            let g = grads.tensors[k].as_slice().expect("standard layout");
            let m = self.m.tensors[k].as_slice_mut().expect("standard layout");
            let v = self.v.tensors[k].as_slice_mut().expect("standard layout");
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}
