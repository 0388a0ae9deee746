//! Small convolutional encoder with hand-written backpropagation.
//!
//! Architecture: `K` blocks of (3×3 same-padding convolution → SiLU → 2×2
//! average pooling), global average pooling, one linear projection to `d`,
//! then L2 normalization. Activations are kept as `(B·H·W) × C` row matrices
//! so every convolution is a single im2col GEMM over the whole batch.

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Square input side; images are resized to this at ingestion.
    pub input_size: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32, 64],
            embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("encoder needs ≥ 1 block, non-zero channels and embed_dim".into()));
        }
        let factor = 1usize << self.channels.len();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 2^{} for {} pooling blocks",
                self.input_size,
                self.channels.len(),
                self.channels.len()
            )));
        }
        Ok(())
    }

    fn block_inputs(&self) -> Vec<(usize, usize)> {
        let mut cin = 3;
        let mut side = self.input_size;
        self.channels
            .iter()
            .map(|&c| {
                let out = (side, cin);
                cin = c;
                side /= 2;
                out
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let convs: usize = self
            .block_inputs()
            .iter()
            .zip(&self.channels)
            .map(|(&(_, cin), &cout)| 9 * cin * cout + cout)
            .sum();
        convs + self.channels.last().unwrap() * self.embed_dim + self.embed_dim
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Pixels scaled to [−1, 1], as a `(B·H·W) × 3` matrix.
fn images_to_rows(images: &[&ImageTensor], side: usize) -> Result<Array2<f64>> {
    let mut rows = Array2::zeros((images.len() * side * side, 3));
    for (b, img) in images.iter().enumerate() {
        if img.height() != side || img.width() != side {
            return Err(Error::Shape(format!(
                "encoder expects {side}×{side} input, got {}×{}",
                img.height(),
                img.width()
            )));
        }
        let px = img.pixels();
        for y in 0..side {
            for x in 0..side {
                let r = (b * side + y) * side + x;
                for c in 0..3 {
                    rows[[r, c]] = px[[y, x, c]] / 127.5 - 1.0;
                }
            }
        }
    }
    Ok(rows)
}

/// 3×3 same-padding patches: row `(b, y, x)`, column `(ky·3 + kx)·C + c`.
fn im2col(input: &Array2<f64>, batch: usize, side: usize) -> Array2<f64> {
    let cin = input.ncols();
    let mut cols = Array2::zeros((batch * side * side, 9 * cin));
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    let width = 9 * cin;
    for b in 0..batch {
        for y in 0..side {
            for x in 0..side {
                let r = (b * side + y) * side + x;
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= side as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= side as isize {
                            continue;
                        }
                        let sr = (b * side + yy as usize) * side + xx as usize;
                        let off = r * width + (ky * 3 + kx) * cin;
                        dst[off..off + cin].copy_from_slice(&src[sr * cin..sr * cin + cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(dcols: &Array2<f64>, batch: usize, side: usize, cin: usize) -> Array2<f64> {
    let mut out = Array2::zeros((batch * side * side, cin));
    let src = dcols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    let width = 9 * cin;
    for b in 0..batch {
        for y in 0..side {
            for x in 0..side {
                let r = (b * side + y) * side + x;
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= side as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= side as isize {
                            continue;
                        }
                        let sr = (b * side + yy as usize) * side + xx as usize;
                        let off = r * width + (ky * 3 + kx) * cin;
                        for c in 0..cin {
                            dst[sr * cin + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    out
}

fn avg_pool2(act: &Array2<f64>, batch: usize, side: usize) -> Array2<f64> {
    let c = act.ncols();
    let half = side / 2;
    let mut out = Array2::zeros((batch * half * half, c));
    for b in 0..batch {
        for y in 0..half {
            for x in 0..half {
                let r = (b * half + y) * half + x;
                let mut row = out.row_mut(r);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let sr = (b * side + 2 * y + dy) * side + 2 * x + dx;
                    row.scaled_add(0.25, &act.row(sr));
                }
            }
        }
    }
    out
}

fn avg_unpool2(grad: &Array2<f64>, batch: usize, side: usize) -> Array2<f64> {
    let c = grad.ncols();
    let half = side / 2;
    let mut out = Array2::zeros((batch * side * side, c));
    for b in 0..batch {
        for y in 0..half {
            for x in 0..half {
                let r = (b * half + y) * half + x;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let sr = (b * side + 2 * y + dy) * side + 2 * x + dx;
                    out.row_mut(sr).scaled_add(0.25, &grad.row(r));
                }
            }
        }
    }
    out
}

struct BlockCache {
    side: usize,
    cin: usize,
    cols: Array2<f64>,
    pre: Array2<f64>,
}

/// Intermediate values of a batch forward pass, consumed by `backward`.
pub struct ForwardCache {
    batch: usize,
    blocks: Vec<BlockCache>,
    pooled: Array2<f64>,
    norms: Vec<f64>,
    z: Array2<f64>,
}

impl ForwardCache {
    /// Unit-norm embeddings, one row per input image.
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamSet,
}

impl Encoder {
    /// Fan-in scaled uniform init (`U(±√(6 / fan_in))`), zero biases.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (&(_, cin), &cout) in config.block_inputs().iter().zip(&config.channels) {
            let fan_in = 9 * cin;
            tensors.push(ParamSet::uniform(&[fan_in, cout], (6.0 / fan_in as f64).sqrt(), rng));
            tensors.push(ndarray::ArrayD::zeros(vec![cout]));
        }
        let last = *config.channels.last().unwrap();
        tensors.push(ParamSet::uniform(&[last, config.embed_dim], (6.0 / last as f64).sqrt(), rng));
        tensors.push(ndarray::ArrayD::zeros(vec![config.embed_dim]));
        Ok(Self {
            config,
            params: ParamSet::new(tensors),
        })
    }

    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = 2 * config.channels.len() + 2;
        if params.len() != expected || params.numel() != config.param_count() {
            return Err(Error::Shape(format!(
                "encoder expects {expected} tensors / {} values, got {} / {}",
                config.param_count(),
                params.len(),
                params.numel()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    fn weight(&self, k: usize) -> ArrayView2<'_, f64> {
        self.params.tensor(k).view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    fn bias(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params.tensor(k).view().into_dimensionality::<Ix1>().expect("1-D bias")
    }

    pub fn forward_batch(&self, images: &[&ImageTensor]) -> Result<ForwardCache> {
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut act = images_to_rows(images, self.config.input_size)?;
        let mut blocks = Vec::with_capacity(self.config.channels.len());
        for (l, &(side, cin)) in self.config.block_inputs().iter().enumerate() {
            let cols = im2col(&act, batch, side);
            let mut pre = cols.dot(&self.weight(2 * l));
            pre += &self.bias(2 * l + 1);
            let activated = pre.mapv(silu);
            act = avg_pool2(&activated, batch, side);
            blocks.push(BlockCache { side, cin, cols, pre });
        }
        let k = self.config.channels.len();
        let spatial = act.nrows() / batch;
        let pooled = act
            .into_shape_with_order((batch, spatial, *self.config.channels.last().unwrap()))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("non-empty");
        let mut u = pooled.dot(&self.weight(2 * k));
        u += &self.bias(2 * k + 1);
        let mut norms = Vec::with_capacity(batch);
        for mut row in u.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        Ok(ForwardCache {
            batch,
            blocks,
            pooled,
            norms,
            z: u,
        })
    }

    /// Embeddings only.
    pub fn embed(&self, images: &[&ImageTensor]) -> Result<Array2<f64>> {
        Ok(self.forward_batch(images)?.z)
    }

    /// Parameter gradients (summed over the batch) for upstream `dL/dz`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<ParamSet> {
        let (batch, d) = (cache.batch, self.config.embed_dim);
        if upstream.dim() != (batch, d) {
            return Err(Error::Shape(format!(
                "upstream gradient must be {batch}×{d}, got {:?}",
                upstream.dim()
            )));
        }
        let k = self.config.channels.len();
        let mut grads = ParamSet::zeros_like(&self.params);

        // z = u / ‖u‖  ⇒  du = (dz − z (z·dz)) / ‖u‖
        let mut du = upstream.clone();
        for (b, mut row) in du.rows_mut().into_iter().enumerate() {
            let z = cache.z.row(b);
            let proj = z.dot(&row);
            row.scaled_add(-proj, &z);
            row.mapv_inplace(|v| v / cache.norms[b]);
        }
        assign(&mut grads, 2 * k, cache.pooled.t().dot(&du).into_dyn());
        assign(&mut grads, 2 * k + 1, du.sum_axis(Axis(0)).into_dyn());
        let dpooled = du.dot(&self.weight(2 * k).t());

        let last = &cache.blocks[k - 1];
        let half = last.side / 2;
        let spatial = half * half;
        let mut dact_pooled = Array2::zeros((batch * spatial, dpooled.ncols()));
        for b in 0..batch {
            let g = dpooled.row(b).mapv(|v| v / spatial as f64);
            for p in 0..spatial {
                dact_pooled.row_mut(b * spatial + p).assign(&g);
            }
        }

        for l in (0..k).rev() {
            let block = &cache.blocks[l];
            let mut dpre = avg_unpool2(&dact_pooled, batch, block.side);
            ndarray::Zip::from(&mut dpre)
                .and(&block.pre)
                .for_each(|g, &x| *g *= silu_grad(x));
            assign(&mut grads, 2 * l, block.cols.t().dot(&dpre).into_dyn());
            assign(&mut grads, 2 * l + 1, dpre.sum_axis(Axis(0)).into_dyn());
            if l > 0 {
                let dcols = dpre.dot(&self.weight(2 * l).t());
                dact_pooled = col2im(&dcols, batch, block.side, block.cin);
            }
        }
        Ok(grads)
    }

    /// Unit-norm embedding of a single image.
    pub fn forward(&self, image: &ImageTensor) -> Result<Array1<f64>> {
        let z = self.embed(&[image])?;
        Ok(z.row(0).to_owned())
    }

    /// Parameter gradients for a single image and upstream `dL/dz`.
    pub fn backward_single(&self, image: &ImageTensor, upstream: &Array1<f64>) -> Result<ParamSet> {
        let cache = self.forward_batch(&[image])?;
        let up = upstream
            .clone()
            .into_shape_with_order((1, upstream.len()))
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.backward(&cache, &up)
    }
}

fn assign(grads: &mut ParamSet, k: usize, value: ndarray::ArrayD<f64>) {
    let t = grads.tensor_mut(k);
    debug_assert_eq!(t.shape(), value.shape());
    *t = value.as_standard_layout().into_owned();
}

/// `(I − z zᵀ) v / ‖u‖`: gradient of the normalization map.
pub fn normalization_backward(z: ndarray::ArrayView1<f64>, norm: f64, v: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let proj = z.dot(&v);
    (&v - &(&z * proj)) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_size: 8,
            channels: vec![4, 6, 8],
            embed_dim: 5,
        }
    }

    fn image(seed: u64, side: usize) -> ImageTensor {
        let mut rng = seeded(seed);
        ImageTensor::from_fn(side, side, |_, _, _| rng_val(&mut rng))
    }

    fn rng_val(rng: &mut crate::rng::Rng) -> f64 {
        rng.gen_range(0.0..255.0)
    }

    #[test]
    fn outputs_are_unit_norm_and_deterministic() {
        let enc = Encoder::new(small(), &mut seeded(1)).unwrap();
        let img = image(2, 8);
        let a = enc.forward(&img).unwrap();
        let b = enc.forward(&img).unwrap();
        assert_eq!(a, b);
        assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-12);
        let zero = enc.forward(&ImageTensor::filled(8, 8, 0.0)).unwrap();
        assert!((&zero - &a).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let enc = Encoder::new(small(), &mut seeded(4)).unwrap();
        let imgs: Vec<ImageTensor> = (0..3).map(|s| image(10 + s, 8)).collect();
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let z = enc.embed(&refs).unwrap();
        for (b, img) in imgs.iter().enumerate() {
            let single = enc.forward(img).unwrap();
            for j in 0..5 {
                assert!((z[[b, j]] - single[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let enc = Encoder::new(small(), &mut seeded(1)).unwrap();
        assert!(matches!(enc.forward(&image(0, 16)), Err(Error::Shape(_))));
        let bad = EncoderConfig {
            input_size: 12,
            ..small()
        };
        assert!(Encoder::new(bad, &mut seeded(0)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let enc = Encoder::new(small(), &mut seeded(1)).unwrap();
        let g = enc.backward_single(&image(3, 8), &Array1::zeros(5)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn normalization_gradient_is_orthogonal_to_output() {
        let z = ndarray::arr1(&[0.6, 0.8, 0.0]);
        let v = ndarray::arr1(&[0.3, -1.2, 2.0]);
        let g = normalization_backward(z.view(), 2.5, v.view());
        assert!(g.dot(&z).abs() < 1e-15);
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = seeded(5);
        let x = Array2::from_shape_fn((2 * 4 * 4, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((2 * 4 * 4, 27), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&im2col(&x, 2, 4) * &y).sum();
        let rhs = (&x * &col2im(&y, 2, 4, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let enc = Encoder::new(small(), &mut seeded(7)).unwrap();
        let imgs: Vec<ImageTensor> = (0..2).map(|s| image(20 + s, 8)).collect();
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let mut rng = seeded(8);
        let up = Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0..1.0));
        let cache = enc.forward_batch(&refs).unwrap();
        let grads = enc.backward(&cache, &up).unwrap();
        let objective = |e: &Encoder| (&e.embed(&refs).unwrap() * &up).sum();
        let h = 1e-5;
        for idx in (0..enc.params().numel()).step_by(7) {
            let mut plus = enc.clone();
            plus.params_mut().set_flat(idx, enc.params().get_flat(idx) + h);
            let mut minus = enc.clone();
            minus.params_mut().set_flat(idx, enc.params().get_flat(idx) - h);
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let analytic = grads.get_flat(idx);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {idx}: analytic {analytic} numeric {numeric}");
        }
    }
}
