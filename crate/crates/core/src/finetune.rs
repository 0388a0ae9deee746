//! Supervised fine-tuning: classifier head, auxiliary stain-matrix head and
//! the combined objective `L_cl − η·L_a`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPipeline;
use crate::checkpoint::{Checkpoint, HeadState, Stage};
use crate::data::LabeledImage;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{class_alpha, AlphaMode};
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::rng::{rng_for, Rng as ChaRng};
use crate::stain::{estimate_stains, hed_augment, reference_basis, rgb_to_od, StainConfig};

/// How the auxiliary gradient is routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSignMode {
    /// Aux head minimizes `L_a`; the encoder receives `−η·∇L_a`.
    Reversal,
    /// Every parameter follows the gradient of `L_cl − η·L_a`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub eta: f64,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub class_weights: AlphaMode,
    pub hidden1: usize,
    pub hidden2: usize,
    pub aux_sign_mode: AuxSignMode,
    /// Accept a pretrain-stage checkpoint as init (no-relax baseline).
    pub allow_pretrain_init: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            dropout_p: 0.5,
            learning_rate: 2e-5,
            epochs: 20,
            batch_size: 8,
            class_weights: AlphaMode::InverseClassFrequency,
            hidden1: 64,
            hidden2: 16,
            aux_sign_mode: AuxSignMode::Reversal,
            allow_pretrain_init: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("finetune.eta must be ≥ 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "finetune.dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("finetune.learning_rate must be ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("finetune.epochs and batch_size must be ≥ 1".into()));
        }
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::Config("finetune hidden widths must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Mean of `w[y_i] · CE_i` over the batch, with its gradient w.r.t. the logits.
pub fn classification_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    if logits.ncols() != 2 || logits.nrows() != labels.len() || logits.nrows() == 0 {
        return Err(Error::Shape(format!(
            "logits must be N×2 with N = {} labels, got {:?}",
            labels.len(),
            logits.dim()
        )));
    }
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let w = *class_weights
            .get(y)
            .ok_or_else(|| Error::Shape(format!("label {y} has no class weight")))?;
        let m = row[0].max(row[1]);
        let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
        total += w * (lse - row[y]);
        for c in 0..2 {
            let p = (row[c] - lse).exp();
            grad[[i, c]] = w * (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean over the batch of `‖Ŵ − W‖²`, with gradient `2(Ŵ − W)/B`.
pub fn auxiliary_loss(predicted: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if predicted.dim() != target.dim() || predicted.ncols() != 6 || predicted.nrows() == 0 {
        return Err(Error::Shape(format!(
            "auxiliary predictions and targets must both be B×6, got {:?} and {:?}",
            predicted.dim(),
            target.dim()
        )));
    }
    let b = predicted.nrows() as f64;
    let diff = &predicted - &target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / b;
    Ok((loss, diff * (2.0 / b)))
}

pub fn total_finetune_loss(classification: f64, auxiliary: f64, eta: f64) -> f64 {
    classification - eta * auxiliary
}

/// `(aux-head scale, encoder scale)` applied to `∇L_a`.
pub fn aux_gradient_scales(mode: AuxSignMode, eta: f64) -> (f64, f64) {
    match mode {
        AuxSignMode::Reversal => (eta, -eta),
        AuxSignMode::Literal => (-eta, -eta),
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Classifier (d → h₁ → h₂ → 2, SiLU, dropout after each hidden layer) and
/// auxiliary head (d → 6).
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    embed_dim: usize,
    hidden: (usize, usize),
    params: ParamSet,
}

pub struct HeadCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    out1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    pre2: Array2<f64>,
    out2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    pub logits: Array2<f64>,
    pub aux: Array2<f64>,
}

/// Dropout is applied only in training mode.
pub enum HeadMode<'a> {
    Eval,
    Train { dropout_p: f64, rng: &'a mut ChaRng },
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, hidden: (usize, usize), rng: &mut R) -> Self {
        let shapes = [
            (embed_dim, hidden.0),
            (hidden.0, hidden.1),
            (hidden.1, 2),
            (embed_dim, 6),
        ];
        let mut tensors = Vec::new();
        for (fan_in, fan_out) in shapes {
            tensors.push(ParamSet::uniform(&[fan_in, fan_out], (6.0 / fan_in as f64).sqrt(), rng));
            tensors.push(ndarray::ArrayD::zeros(vec![fan_out]));
        }
        Self {
            embed_dim,
            hidden,
            params: ParamSet::new(tensors),
        }
    }

    pub fn from_state(embed_dim: usize, state: HeadState) -> Result<Self> {
        let (h1, h2) = state.hidden;
        let expected = [
            vec![embed_dim, h1],
            vec![h1],
            vec![h1, h2],
            vec![h2],
            vec![h2, 2],
            vec![2],
            vec![embed_dim, 6],
            vec![6],
        ];
        let ok = state.params.len() == expected.len()
            && state.params.tensors().iter().zip(&expected).all(|(t, s)| t.shape() == s.as_slice());
        if !ok {
            return Err(Error::Checkpoint("head tensors do not match the configured widths".into()));
        }
        Ok(Self {
            embed_dim,
            hidden: state.hidden,
            params: state.params,
        })
    }

    pub fn to_state(&self) -> HeadState {
        HeadState {
            hidden: self.hidden,
            params: self.params.clone(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn w(&self, k: usize) -> ArrayView2<'_, f64> {
        self.params.tensor(k).view().into_dimensionality::<Ix2>().expect("2-D")
    }

    fn b(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params.tensor(k).view().into_dimensionality::<Ix1>().expect("1-D")
    }

    pub fn forward(&self, z: &Array2<f64>, mode: HeadMode<'_>) -> Result<HeadCache> {
        if z.ncols() != self.embed_dim {
            return Err(Error::Shape(format!(
                "heads expect embeddings of dim {}, got {}",
                self.embed_dim,
                z.ncols()
            )));
        }
        let (p, mut rng) = match mode {
            HeadMode::Eval => (0.0, None),
            HeadMode::Train { dropout_p, rng } => (dropout_p, Some(rng)),
        };
        let mut mask = |shape: (usize, usize)| -> Option<Array2<f64>> {
            let rng = rng.as_mut()?;
            if p == 0.0 {
                return None;
            }
            let keep = 1.0 / (1.0 - p);
            Some(Array2::from_shape_simple_fn(shape, || {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            }))
        };

        let pre1 = z.dot(&self.w(0)) + &self.b(1);
        let mut out1 = pre1.mapv(silu);
        let mask1 = mask(out1.dim());
        if let Some(m) = &mask1 {
            out1 *= m;
        }
        let pre2 = out1.dot(&self.w(2)) + &self.b(3);
        let mut out2 = pre2.mapv(silu);
        let mask2 = mask(out2.dim());
        if let Some(m) = &mask2 {
            out2 *= m;
        }
        let logits = out2.dot(&self.w(4)) + &self.b(5);
        let aux = z.dot(&self.w(6)) + &self.b(7);
        Ok(HeadCache {
            input: z.clone(),
            pre1,
            out1,
            mask1,
            pre2,
            out2,
            mask2,
            logits,
            aux,
        })
    }

    /// Head gradients and `dL/dz`. `daux_head` drives the auxiliary head's
    /// own parameters; `daux_encoder` is what flows back into `z`.
    pub fn backward(
        &self,
        cache: &HeadCache,
        dlogits: &Array2<f64>,
        daux_head: &Array2<f64>,
        daux_encoder: &Array2<f64>,
    ) -> (ParamSet, Array2<f64>) {
        let mut g = Vec::with_capacity(8);
        let dw3 = cache.out2.t().dot(dlogits);
        let db3 = dlogits.sum_axis(Axis(0));
        let mut d2 = dlogits.dot(&self.w(4).t());
        if let Some(m) = &cache.mask2 {
            d2 *= m;
        }
        ndarray::Zip::from(&mut d2).and(&cache.pre2).for_each(|g, &x| *g *= silu_grad(x));
        let dw2 = cache.out1.t().dot(&d2);
        let db2 = d2.sum_axis(Axis(0));
        let mut d1 = d2.dot(&self.w(2).t());
        if let Some(m) = &cache.mask1 {
            d1 *= m;
        }
        ndarray::Zip::from(&mut d1).and(&cache.pre1).for_each(|g, &x| *g *= silu_grad(x));
        let dw1 = cache.input.t().dot(&d1);
        let db1 = d1.sum_axis(Axis(0));
        let dwa = cache.input.t().dot(daux_head);
        let dba = daux_head.sum_axis(Axis(0));

        let dz = d1.dot(&self.w(0).t()) + daux_encoder.dot(&self.w(6).t());
        for t in [dw1.into_dyn(), db1.into_dyn(), dw2.into_dyn(), db2.into_dyn()] {
            g.push(t);
        }
        for t in [dw3.into_dyn(), db3.into_dyn(), dwa.into_dyn(), dba.into_dyn()] {
            g.push(t);
        }
        (ParamSet::new(g), dz)
    }
}

/// Encoder plus heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder,
    pub heads: Heads,
}

impl Classifier {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_stage(&[Stage::Finetune])?;
        let encoder = Encoder::from_params(ckpt.encoder_config.clone(), ckpt.encoder_params.clone())?;
        let state = ckpt
            .heads
            .clone()
            .ok_or_else(|| Error::Checkpoint("finetune checkpoint has no heads".into()))?;
        let heads = Heads::from_state(ckpt.encoder_config.embed_dim, state)?;
        Ok(Self { encoder, heads })
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, images: &[&ImageTensor]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), 2));
        for (c, chunk) in images.chunks(64).enumerate() {
            let z = self.encoder.embed(chunk)?;
            let cache = self.heads.forward(&z, HeadMode::Eval)?;
            out.slice_mut(ndarray::s![c * 64..c * 64 + chunk.len(), ..]).assign(&cache.logits);
        }
        Ok(out)
    }

    /// Argmax of the two logits (0 benign, 1 malignant).
    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits.rows().into_iter().map(|r| usize::from(r[1] > r[0])).collect()
}

/// Per-class weights `N / (2 · count(c))` from the training labels.
pub fn class_weights(labels: &[usize], mode: AlphaMode) -> [f64; 2] {
    let alpha = class_alpha(labels, mode);
    let mut w = [1.0, 1.0];
    for (&y, &a) in labels.iter().zip(&alpha) {
        w[y] = a;
    }
    w
}

pub struct StepOutput {
    pub total: f64,
    pub classification: f64,
    pub auxiliary: f64,
    pub encoder_grads: ParamSet,
    pub head_grads: ParamSet,
    pub logits: Array2<f64>,
}

/// One forward/backward pass of the combined objective.
pub fn finetune_step(
    model: &Classifier,
    images: &[&ImageTensor],
    labels: &[usize],
    targets: &Array2<f64>,
    class_weights: &[f64],
    cfg: &FinetuneConfig,
    dropout_rng: Option<&mut ChaRng>,
) -> Result<StepOutput> {
    let cache = model.encoder.forward_batch(images)?;
    let mode = match dropout_rng {
        Some(rng) => HeadMode::Train {
            dropout_p: cfg.dropout_p,
            rng,
        },
        None => HeadMode::Eval,
    };
    let heads = model.heads.forward(cache.embeddings(), mode)?;
    let (cl, dlogits) = classification_loss(heads.logits.view(), labels, class_weights)?;
    let (la, daux) = auxiliary_loss(heads.aux.view(), targets.view())?;
    let (head_scale, enc_scale) = aux_gradient_scales(cfg.aux_sign_mode, cfg.eta);
    let (head_grads, dz) = model
        .heads
        .backward(&heads, &dlogits, &(&daux * head_scale), &(&daux * enc_scale));
    let encoder_grads = model.encoder.backward(&cache, &dz)?;
    Ok(StepOutput {
        total: total_finetune_loss(cl, la, cfg.eta),
        classification: cl,
        auxiliary: la,
        encoder_grads,
        head_grads,
        logits: heads.logits,
    })
}

/// HED-augments (p = 1), fits the stain matrix of the result as the
/// auxiliary target, then applies the remaining pipeline.
pub fn prepare_finetune_view<R: Rng + ?Sized>(
    image: &ImageTensor,
    pipeline: &AugmentPipeline,
    hed_cfg: &StainConfig,
    hed_strength: f64,
    rng: &mut R,
) -> Result<(ImageTensor, [f64; 6])> {
    let hed = match hed_augment(image, hed_cfg, hed_strength, rng) {
        Ok(img) => img,
        Err(Error::BlankImage) => image.clone(),
        Err(e) => return Err(e),
    };
    let target = match estimate_stains(&rgb_to_od(&hed), hed_cfg) {
        Ok(fit) => fit.model.w_row_major(),
        Err(Error::BlankImage) => {
            let w = reference_basis();
            [w[[0, 0]], w[[0, 1]], w[[1, 0]], w[[1, 1]], w[[2, 0]], w[[2, 1]]]
        }
        Err(e) => return Err(e),
    };
    Ok((pipeline.apply(&hed, rng)?, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub classification_loss: f64,
    pub auxiliary_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_balanced_accuracy: Option<f64>,
}

pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<FinetuneEpoch>,
}

/// Everything besides the data that `finetune` needs.
pub struct FinetuneSetup<'a> {
    pub config: &'a FinetuneConfig,
    /// Standard augmentation; any HED step in it is ignored.
    pub pipeline: &'a AugmentPipeline,
    pub hed_stain: StainConfig,
    pub hed_strength: f64,
    pub seed: u64,
}

pub fn finetune(
    train: &[LabeledImage],
    val: &[LabeledImage],
    init: &Checkpoint,
    setup: &FinetuneSetup<'_>,
) -> Result<FinetuneOutcome> {
    let cfg = setup.config;
    cfg.validate()?;
    let allowed: &[Stage] = if cfg.allow_pretrain_init {
        &[Stage::Relax, Stage::Pretrain]
    } else {
        &[Stage::Relax]
    };
    init.expect_stage(allowed)?;
    if train.is_empty() {
        return Err(Error::Data("finetune needs a non-empty training set".into()));
    }
    let encoder = Encoder::from_params(init.encoder_config.clone(), init.encoder_params.clone())?;
    let heads = Heads::new(
        init.encoder_config.embed_dim,
        (cfg.hidden1, cfg.hidden2),
        &mut rng_for(setup.seed, &[0xF1]),
    );
    let mut model = Classifier { encoder, heads };
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut enc_opt = Adam::new(adam, model.encoder.params());
    let mut head_opt = Adam::new(adam, model.heads.params());
    let pipeline = setup.pipeline.without_hed();
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let weights = class_weights(&labels, cfg.class_weights);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = crate::train::shuffled_indices(train.len(), &mut rng_for(setup.seed, &[1, epoch as u64]));
        let (mut loss_sum, mut cl_sum, mut la_sum, mut correct, mut batches) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = rng_for(setup.seed, &[2, epoch as u64, b as u64]);
            let mut views = Vec::with_capacity(chunk.len());
            let mut targets = Array2::zeros((chunk.len(), 6));
            for (k, &i) in chunk.iter().enumerate() {
                let (view, w) =
                    prepare_finetune_view(&train[i].image, &pipeline, &setup.hed_stain, setup.hed_strength, &mut rng)?;
                views.push(view);
                targets.row_mut(k).assign(&Array1::from(w.to_vec()));
            }
            let refs: Vec<&ImageTensor> = views.iter().collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let step = finetune_step(
                &model,
                &refs,
                &batch_labels,
                &targets,
                &weights,
                cfg,
                Some(&mut rng),
            )?;
            if !step.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "finetune loss is {} at epoch {epoch}, batch {b}",
                    step.total
                )));
            }
            enc_opt.step(model.encoder.params_mut(), &step.encoder_grads);
            head_opt.step(model.heads.params_mut(), &step.head_grads);
            if !model.encoder.params().all_finite() || !model.heads.params().all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after epoch {epoch}, batch {b}"
                )));
            }
            correct += argmax_rows(&step.logits)
                .iter()
                .zip(&batch_labels)
                .filter(|(p, y)| p == y)
                .count();
            loss_sum += step.total;
            cl_sum += step.classification;
            la_sum += step.auxiliary;
            batches += 1;
        }
        let (val_accuracy, val_balanced_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (acc, bal) = evaluate_accuracy(&model, val)?;
            (Some(acc), Some(bal))
        };
        let row = FinetuneEpoch {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            classification_loss: cl_sum / batches as f64,
            auxiliary_loss: la_sum / batches as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
            val_balanced_accuracy,
        };
        log::info!(
            "finetune epoch {} loss {:.5} acc {:.3} val {:?}",
            row.epoch,
            row.loss,
            row.train_accuracy,
            row.val_accuracy
        );
        history.push(row);
    }

    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Finetune,
            epoch: cfg.epochs as u32,
            rng_seed: setup.seed,
            predecessor: init.hash(),
            encoder_config: init.encoder_config.clone(),
            encoder_params: model.encoder.params().clone(),
            heads: Some(model.heads.to_state()),
        },
        history,
    })
}

/// Accuracy and balanced accuracy in evaluation mode, without augmentation.
pub fn evaluate_accuracy(model: &Classifier, data: &[LabeledImage]) -> Result<(f64, f64)> {
    let refs: Vec<&ImageTensor> = data.iter().map(|s| &s.image).collect();
    let pred = model.predict(&refs)?;
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for (p, s) in pred.iter().zip(data) {
        counts[s.label] += 1;
        hits[s.label] += usize::from(*p == s.label);
    }
    let acc = (hits[0] + hits[1]) as f64 / data.len() as f64;
    let recalls: Vec<f64> = (0..2)
        .filter(|&c| counts[c] > 0)
        .map(|c| hits[c] as f64 / counts[c] as f64)
        .collect();
    Ok((acc, recalls.iter().sum::<f64>() / recalls.len() as f64))
}
