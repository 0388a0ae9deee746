//! Contrastive losses over a batch of unit embeddings, with exact gradients.
//!
//! Every loss here has the per-anchor shape
//!
//! ```text
//! ℓ_i = Σ_t w_t · ( log Σ_{k ∈ D(i)} c_k exp(s_ik) − s_it ),   s_ik = z_i·z_k / τ
//! ```
//!
//! for a set of numerator targets `t` with weights `w_t` and a weighted
//! denominator set `D(i)`. The four losses only differ in how those sets are
//! chosen, so they share one accumulation kernel. Batch losses are the mean
//! over non-skipped anchors.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::{check_unit_rows, PairSets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Uniform,
    InverseClassFrequency,
}

/// Active loss terms: the modified loss, or a subset of {sup, elim, self}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossCombination {
    Modified,
    Terms { sup: bool, elim: bool, self_: bool },
}

impl LossCombination {
    /// The seven loss-term ablation combinations, in table order.
    pub const ABLATION: [LossCombination; 7] = [
        Self::terms(true, false, false),
        Self::terms(false, true, false),
        Self::terms(false, false, true),
        Self::terms(true, true, false),
        Self::terms(true, false, true),
        Self::terms(false, true, true),
        Self::terms(true, true, true),
    ];

    pub const fn terms(sup: bool, elim: bool, self_: bool) -> Self {
        LossCombination::Terms { sup, elim, self_ }
    }

    /// `comb1`..`comb7`.
    pub fn comb(index: usize) -> Option<Self> {
        index.checked_sub(1).and_then(|i| Self::ABLATION.get(i).copied())
    }

    pub fn name(&self) -> String {
        match self {
            LossCombination::Modified => "modified".into(),
            other => match Self::ABLATION.iter().position(|c| c == other) {
                Some(i) => format!("comb{}", i + 1),
                None => "none".into(),
            },
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "modified" {
            return Ok(LossCombination::Modified);
        }
        lower
            .strip_prefix("comb")
            .and_then(|n| n.parse::<usize>().ok())
            .and_then(Self::comb)
            .ok_or_else(|| {
                Error::Config(format!("unknown loss combination `{s}` (expected modified or comb1..comb7)"))
            })
    }
}

impl TryFrom<String> for LossCombination {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<LossCombination> for String {
    fn from(c: LossCombination) -> String {
        c.name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_neg: f64,
    pub alpha_mode: AlphaMode,
    #[serde(rename = "loss_combination")]
    pub combination: LossCombination,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            lambda_neg: 2.0,
            alpha_mode: AlphaMode::InverseClassFrequency,
            combination: LossCombination::Modified,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda_neg >= 0.0 && self.lambda_neg.is_finite()) {
            return Err(Error::Config(format!("lambda_neg must be ≥ 0, got {}", self.lambda_neg)));
        }
        if self.combination == LossCombination::terms(false, false, false) {
            return Err(Error::Config("loss combination must select at least one term".into()));
        }
        Ok(())
    }
}

/// 2N unit-norm embeddings with labels, patients and source image indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Array2<f64>,
    labels: Vec<usize>,
    patient_ids: Vec<String>,
    source_index: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(
        z: Array2<f64>,
        labels: Vec<usize>,
        patient_ids: Vec<String>,
        source_index: Vec<usize>,
    ) -> Result<Self> {
        let n = z.nrows();
        if labels.len() != n || patient_ids.len() != n || source_index.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} rows has {} labels, {} patient ids, {} source indices",
                labels.len(),
                patient_ids.len(),
                source_index.len()
            )));
        }
        check_unit_rows(z.view())?;
        for i in 0..n {
            for j in i + 1..n {
                if source_index[i] == source_index[j] && labels[i] != labels[j] {
                    return Err(Error::Data(format!(
                        "rows {i} and {j} are views of one image but carry different labels"
                    )));
                }
            }
        }
        Ok(Self {
            z,
            labels,
            patient_ids,
            source_index,
        })
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn source_index(&self) -> &[usize] {
        &self.source_index
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// d loss / d z, same shape as `z`.
    pub grad: Array2<f64>,
    /// Per-anchor loss; `None` for skipped anchors.
    pub per_anchor: Vec<Option<f64>>,
    pub skipped: usize,
}

impl LossOutput {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            loss: 0.0,
            grad: Array2::zeros((n, d)),
            per_anchor: vec![None; n],
            skipped: 0,
        }
    }

    fn add(&mut self, other: &LossOutput) {
        self.loss += other.loss;
        self.grad += &other.grad;
        self.skipped = self.skipped.max(other.skipped);
        for (a, b) in self.per_anchor.iter_mut().zip(&other.per_anchor) {
            *a = match (*a, *b) {
                (Some(x), Some(y)) => Some(x + y),
                (x, None) => x,
                (None, y) => y,
            };
        }
    }
}

/// `uniform` → 1; `inverse_class_frequency` → `B / (2 · count(label_i))`.
pub fn class_alpha(labels: &[usize], mode: AlphaMode) -> Vec<f64> {
    match mode {
        AlphaMode::Uniform => vec![1.0; labels.len()],
        AlphaMode::InverseClassFrequency => {
            let b = labels.len() as f64;
            let max = labels.iter().copied().max().unwrap_or(0);
            let mut counts = vec![0usize; max + 1];
            for &l in labels {
                counts[l] += 1;
            }
            labels.iter().map(|&l| b / (2.0 * counts[l] as f64)).collect()
        }
    }
}

/// Accumulates one anchor's loss and its gradient into `grad` (unscaled).
fn accumulate_anchor(
    z: ArrayView2<f64>,
    gram: &Array2<f64>,
    tau: f64,
    anchor: usize,
    targets: &[(usize, f64)],
    denominator: &[(usize, f64)],
    grad: &mut Array2<f64>,
) -> f64 {
    let logit = |k: usize| gram[[anchor, k]] / tau;
    let shift = denominator
        .iter()
        .filter(|(_, c)| *c > 0.0)
        .map(|&(k, _)| logit(k))
        .fold(f64::NEG_INFINITY, f64::max);
    let terms: Vec<f64> = denominator
        .iter()
        .map(|&(k, c)| c * (logit(k) - shift).exp())
        .collect();
    let partition: f64 = terms.iter().sum();
    let log_partition = shift + partition.ln();
    let weight_sum: f64 = targets.iter().map(|(_, w)| w).sum();

    let mut loss = 0.0;
    // d ℓ / d s_ik, then chain through s_ik = z_i·z_k / τ.
    let push = |k: usize, ds: f64, grad: &mut Array2<f64>| {
        let g = ds / tau;
        let zi = z.row(anchor).to_owned();
        let zk = z.row(k).to_owned();
        grad.row_mut(anchor).scaled_add(g, &zk);
        grad.row_mut(k).scaled_add(g, &zi);
    };
    for &(t, w) in targets {
        loss += w * (log_partition - logit(t));
        push(t, -w, grad);
    }
    for (&(k, _), term) in denominator.iter().zip(&terms) {
        push(k, weight_sum * term / partition, grad);
    }
    loss
}

fn finish(mut out: LossOutput, counted: usize) -> Result<LossOutput> {
    if counted == 0 {
        return Err(Error::NoPositivePairs);
    }
    let inv = 1.0 / counted as f64;
    out.loss *= inv;
    out.grad.mapv_inplace(|g| g * inv);
    Ok(out)
}

fn check_inputs(z: ArrayView2<f64>, pairs: &PairSets) -> Result<()> {
    if z.nrows() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows but pair sets for {} anchors",
            z.nrows(),
            pairs.len()
        )));
    }
    Ok(())
}

fn partner_of(pairs: &PairSets, i: usize) -> Result<usize> {
    pairs
        .partner(i)
        .ok_or_else(|| Error::Data(format!("row {i} has no augmentation partner")))
}

/// Modified supervised contrastive loss: positives and λ-weighted negatives
/// in the denominator, `α_i / |P(i)|` outside the log. Anchors with empty
/// `P(i)` are skipped. Norms are not checked.
pub fn modified_supcon_raw(
    z: ArrayView2<f64>,
    pairs: &PairSets,
    alpha: &[f64],
    tau: f64,
    lambda_neg: f64,
) -> Result<LossOutput> {
    check_inputs(z, pairs)?;
    let (n, d) = z.dim();
    if alpha.len() != n {
        return Err(Error::Shape(format!("{} alpha weights for {n} rows", alpha.len())));
    }
    let gram = z.dot(&z.t());
    let mut out = LossOutput::zeros(n, d);
    let mut counted = 0;
    for i in 0..n {
        let p = pairs.positives(i);
        if p.is_empty() {
            out.skipped += 1;
            continue;
        }
        let w = alpha[i] / p.len() as f64;
        let targets: Vec<(usize, f64)> = p.iter().map(|&k| (k, w)).collect();
        let denominator: Vec<(usize, f64)> = p
            .iter()
            .map(|&k| (k, 1.0))
            .chain(pairs.negatives(i).iter().map(|&k| (k, lambda_neg)))
            .collect();
        let l = accumulate_anchor(z, &gram, tau, i, &targets, &denominator, &mut out.grad);
        out.per_anchor[i] = Some(l);
        out.loss += l;
        counted += 1;
    }
    if out.skipped > 0 {
        log::debug!("modified loss skipped {} anchors with empty P", out.skipped);
    }
    finish(out, counted)
}

/// Self-supervised (NT-Xent) loss: partner in the numerator, every other row
/// in the denominator.
pub fn self_supervised_raw(z: ArrayView2<f64>, pairs: &PairSets, tau: f64) -> Result<LossOutput> {
    check_inputs(z, pairs)?;
    let (n, d) = z.dim();
    let gram = z.dot(&z.t());
    let mut out = LossOutput::zeros(n, d);
    for i in 0..n {
        let j = partner_of(pairs, i)?;
        let denominator: Vec<(usize, f64)> = (0..n).filter(|&k| k != i).map(|k| (k, 1.0)).collect();
        let l = accumulate_anchor(z, &gram, tau, i, &[(j, 1.0)], &denominator, &mut out.grad);
        out.per_anchor[i] = Some(l);
        out.loss += l;
    }
    finish(out, n)
}

/// Supervised contrastive loss: every positive in the numerator (averaged),
/// every other row in the denominator. Anchors with empty `P(i)` are skipped.
pub fn supervised_raw(z: ArrayView2<f64>, pairs: &PairSets, tau: f64) -> Result<LossOutput> {
    check_inputs(z, pairs)?;
    let (n, d) = z.dim();
    let gram = z.dot(&z.t());
    let mut out = LossOutput::zeros(n, d);
    let mut counted = 0;
    for i in 0..n {
        let p = pairs.positives(i);
        if p.is_empty() {
            out.skipped += 1;
            continue;
        }
        let w = 1.0 / p.len() as f64;
        let targets: Vec<(usize, f64)> = p.iter().map(|&k| (k, w)).collect();
        let denominator: Vec<(usize, f64)> = (0..n).filter(|&k| k != i).map(|k| (k, 1.0)).collect();
        let l = accumulate_anchor(z, &gram, tau, i, &targets, &denominator, &mut out.grad);
        out.per_anchor[i] = Some(l);
        out.loss += l;
        counted += 1;
    }
    finish(out, counted)
}

/// Elimination loss: partner in the numerator; the denominator holds the
/// partner term plus every row outside `P(i)` (other than the anchor).
pub fn elimination_raw(z: ArrayView2<f64>, pairs: &PairSets, tau: f64) -> Result<LossOutput> {
    check_inputs(z, pairs)?;
    let (n, d) = z.dim();
    let gram = z.dot(&z.t());
    let mut out = LossOutput::zeros(n, d);
    for i in 0..n {
        let j = partner_of(pairs, i)?;
        let denominator: Vec<(usize, f64)> = (0..n)
            .filter(|&k| k != i && (k == j || !pairs.is_positive(i, k)))
            .map(|k| (k, 1.0))
            .collect();
        let l = accumulate_anchor(z, &gram, tau, i, &[(j, 1.0)], &denominator, &mut out.grad);
        out.per_anchor[i] = Some(l);
        out.loss += l;
    }
    finish(out, n)
}

/// Sum of the terms selected by `cfg.combination`. `alpha` is only used by
/// the modified loss.
pub fn combined_raw(
    z: ArrayView2<f64>,
    pairs: &PairSets,
    alpha: &[f64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    match cfg.combination {
        LossCombination::Modified => modified_supcon_raw(z, pairs, alpha, cfg.tau, cfg.lambda_neg),
        LossCombination::Terms { sup, elim, self_ } => {
            let mut total = LossOutput::zeros(z.nrows(), z.ncols());
            if sup {
                total.add(&supervised_raw(z, pairs, cfg.tau)?);
            }
            if elim {
                total.add(&elimination_raw(z, pairs, cfg.tau)?);
            }
            if self_ {
                total.add(&self_supervised_raw(z, pairs, cfg.tau)?);
            }
            Ok(total)
        }
    }
}

fn check_pairs_match(batch: &EmbeddingBatch, pairs: &PairSets) -> Result<()> {
    if pairs.len() != batch.len() {
        return Err(Error::Shape(format!(
            "pair sets cover {} anchors, batch has {} rows",
            pairs.len(),
            batch.len()
        )));
    }
    Ok(())
}

pub fn modified_supcon_loss(batch: &EmbeddingBatch, pairs: &PairSets, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_pairs_match(batch, pairs)?;
    let alpha = class_alpha(&batch.labels, cfg.alpha_mode);
    modified_supcon_raw(batch.z.view(), pairs, &alpha, cfg.tau, cfg.lambda_neg)
}

pub fn self_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let pairs = crate::pairs::build_pair_sets(&batch.labels, &batch.source_index)?;
    self_supervised_raw(batch.z.view(), &pairs, cfg.tau)
}

pub fn sup_loss(batch: &EmbeddingBatch, pairs: &PairSets, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_pairs_match(batch, pairs)?;
    supervised_raw(batch.z.view(), pairs, cfg.tau)
}

pub fn elim_loss(batch: &EmbeddingBatch, pairs: &PairSets, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_pairs_match(batch, pairs)?;
    elimination_raw(batch.z.view(), pairs, cfg.tau)
}

pub fn combined_loss(batch: &EmbeddingBatch, pairs: &PairSets, cfg: &LossConfig) -> Result<LossOutput> {
    check_pairs_match(batch, pairs)?;
    let alpha = class_alpha(&batch.labels, cfg.alpha_mode);
    combined_raw(batch.z.view(), pairs, &alpha, cfg)
}
