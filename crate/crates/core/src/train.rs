//! Contrastive training loop for the pretrain and retrain stages.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPipeline;
use crate::checkpoint::{Checkpoint, Stage};
use crate::data::LabeledImage;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{class_alpha, combined_raw, LossConfig};
use crate::pairs::RelaxedPairs;
use crate::params::{Adam, AdamConfig};
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Source images per batch; each contributes two augmented rows.
    pub batch_size: usize,
    pub rng_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 200,
            batch_size: 12,
            rng_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be ≥ 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam needs β ∈ [0, 1) and ε > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

pub fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains `encoder` with the configured contrastive loss.
///
/// Each batch of `N` sources becomes `2N` rows `[view₁…, view₂…]`. Pair sets
/// come from labels and source indices minus whatever `relaxed` removed.
pub fn train_contrastive(
    dataset: &[LabeledImage],
    mut encoder: Encoder,
    relaxed: &RelaxedPairs,
    pipeline: &AugmentPipeline,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    stage: Stage,
    predecessor: [u8; 32],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("contrastive training needs a non-empty dataset".into()));
    }
    if !(dataset.iter().any(|s| s.label == 0) && dataset.iter().any(|s| s.label == 1)) {
        return Err(Error::Data("contrastive training needs both classes present".into()));
    }
    let mut adam = Adam::new(cfg.adam(), encoder.params());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(dataset.len(), &mut rng_for(cfg.rng_seed, &[1, epoch as u64]));
        let mut total = 0.0;
        let mut counted = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = rng_for(cfg.rng_seed, &[2, epoch as u64, b as u64]);
            let n = chunk.len();
            let mut first = Vec::with_capacity(n);
            let mut second = Vec::with_capacity(n);
            for &i in chunk {
                let (a, v) = pipeline.positive_pair(&dataset[i].image, &mut rng)?;
                first.push(a);
                second.push(v);
            }
            let views: Vec<&ImageTensor> = first.iter().chain(second.iter()).collect();
            let sources: Vec<usize> = chunk.iter().chain(chunk.iter()).copied().collect();
            let labels: Vec<usize> = sources.iter().map(|&i| dataset[i].label).collect();
            let pairs = relaxed.restrict(&labels, &sources)?;
            let alpha = class_alpha(&labels, loss_cfg.alpha_mode);

            let cache = encoder.forward_batch(&views)?;
            let out = match combined_raw(cache.embeddings().view(), &pairs, &alpha, loss_cfg) {
                Ok(out) => out,
                Err(Error::NoPositivePairs) => {
                    log::debug!("epoch {epoch} batch {b}: no positive pairs, skipped");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() || !out.grad.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{stage} loss is {} at epoch {epoch}, batch {b} (sources {chunk:?})",
                    out.loss
                )));
            }
            let grads = encoder.backward(&cache, &out.grad)?;
            adam.step(encoder.params_mut(), &grads);
            if !encoder.params().all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite encoder parameters after epoch {epoch}, batch {b}"
                )));
            }
            total += out.loss;
            counted += 1;
        }
        let mean = if counted == 0 { f64::NAN } else { total / counted as f64 };
        log::info!("{stage} epoch {} loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage,
            epoch: cfg.epochs as u32,
            rng_seed: cfg.rng_seed,
            predecessor,
            encoder_config: encoder.config().clone(),
            encoder_params: encoder.into_params(),
            heads: None,
        },
        epoch_losses,
    })
}

/// Unit-norm embeddings of un-augmented images, in dataset order.
pub fn embed_dataset(encoder: &Encoder, dataset: &[LabeledImage]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((dataset.len(), encoder.config().embed_dim));
    for (c, chunk) in dataset.chunks(64).enumerate() {
        let refs: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let z = encoder.embed(&refs)?;
        out.slice_mut(ndarray::s![c * 64..c * 64 + chunk.len(), ..]).assign(&z);
    }
    Ok(out)
}
