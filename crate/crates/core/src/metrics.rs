//! Binary classification scores. Malignant (label 1) is the positive class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BENIGN: usize = 0;
pub const MALIGNANT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub item_id: String,
    pub patient_id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub fold: usize,
    pub magnification: String,
}

impl EvaluationRecord {
    pub fn is_correct(&self) -> bool {
        self.true_label == self.predicted_label
    }
}

fn validate(records: &[EvaluationRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("no evaluation records".into()));
    }
    for r in records {
        if r.true_label > 1 || r.predicted_label > 1 {
            return Err(Error::Data(format!("record `{}` has a non-binary label", r.item_id)));
        }
        if r.patient_id.is_empty() {
            return Err(Error::Data(format!("record `{}` has an empty patient id", r.item_id)));
        }
    }
    Ok(())
}

pub fn image_level_accuracy(records: &[EvaluationRecord]) -> Result<f64> {
    validate(records)?;
    Ok(records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64)
}

/// Mean of per-patient accuracies, each patient weighted equally.
pub fn patient_level_accuracy(records: &[EvaluationRecord]) -> Result<f64> {
    validate(records)?;
    let mut per_patient: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = per_patient.entry(r.patient_id.as_str()).or_default();
        e.0 += r.is_correct() as usize;
        e.1 += 1;
    }
    let total: f64 = per_patient.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Ok(total / per_patient.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn from_records(records: &[EvaluationRecord]) -> Self {
        let mut m = Self::default();
        for r in records {
            match (r.true_label == MALIGNANT, r.predicted_label == MALIGNANT) {
                (true, true) => m.tp += 1,
                (false, true) => m.fp += 1,
                (false, false) => m.tn += 1,
                (true, false) => m.fn_ += 1,
            }
        }
        m
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub precision: f64,
    pub recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub dice: f64,
    /// Names of scores whose denominator was zero (reported as 0).
    pub undefined: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        if !undefined.iter().any(|u| u == name) {
            undefined.push(name.to_string());
        }
        0.0
    } else {
        num / den
    }
}

impl ClassificationScores {
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let n = m.total();
        if n == 0 {
            return Err(Error::Data("empty confusion matrix".into()));
        }
        let (tp, fp, tn, fn_) = (m.tp as f64, m.fp as f64, m.tn as f64, m.fn_ as f64);
        let n = n as f64;
        let mut undefined = Vec::new();

        let precision = ratio(tp, tp + fp, "precision", &mut undefined);
        let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
        let dice = ratio(2.0 * tp, 2.0 * tp + fp + fn_, "dice", &mut undefined);

        let specificity = ratio(tn, tn + fp, "specificity", &mut undefined);
        let f1_pos = dice;
        let f1_neg = ratio(2.0 * tn, 2.0 * tn + fp + fn_, "negative_f1", &mut undefined);
        let support_pos = tp + fn_;
        let support_neg = tn + fp;
        let weighted_f1 = (f1_pos * support_pos + f1_neg * support_neg) / n;

        let accuracy = (tp + tn) / n;
        let balanced_accuracy = match (support_pos > 0.0, support_neg > 0.0) {
            (true, true) => 0.5 * (recall + specificity),
            (true, false) => recall,
            (false, true) => specificity,
            (false, false) => unreachable!(),
        };

        let p_o = accuracy;
        let p_e = ((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp)) / (n * n);
        let kappa = ratio(p_o - p_e, 1.0 - p_e, "kappa", &mut undefined);

        Ok(Self {
            precision,
            recall,
            weighted_f1,
            accuracy,
            balanced_accuracy,
            kappa,
            dice,
            undefined,
        })
    }
}

pub fn classification_scores(records: &[EvaluationRecord]) -> Result<ClassificationScores> {
    validate(records)?;
    ClassificationScores::from_confusion(&ConfusionMatrix::from_records(records))
}

/// Scores for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub scores: ClassificationScores,
    pub image_level_accuracy: f64,
    pub patient_level_accuracy: f64,
}

impl FoldMetrics {
    pub fn from_records(fold: usize, records: &[EvaluationRecord]) -> Result<Self> {
        Ok(Self {
            fold,
            scores: classification_scores(records)?,
            image_level_accuracy: image_level_accuracy(records)?,
            patient_level_accuracy: patient_level_accuracy(records)?,
        })
    }

    /// Column values in [`REPORT_COLUMNS`] order.
    pub fn row(&self) -> [f64; 7] {
        let s = &self.scores;
        [
            s.precision,
            s.recall,
            s.weighted_f1,
            s.accuracy,
            s.balanced_accuracy,
            s.kappa,
            s.dice,
        ]
    }
}

/// Table columns, in the published order.
pub const REPORT_COLUMNS: [&str; 7] = [
    "Precision",
    "Recall",
    "Weight-F1",
    "Acc",
    "Balance-Acc",
    "Kappa",
    "Dice",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample (n − 1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    /// Per column of [`REPORT_COLUMNS`].
    pub summary: Vec<MeanStd>,
    pub image_level_accuracy: MeanStd,
    pub patient_level_accuracy: MeanStd,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Data("metrics report needs at least one fold".into()));
        }
        let summary = (0..REPORT_COLUMNS.len())
            .map(|c| mean_std(&folds.iter().map(|f| f.row()[c]).collect::<Vec<_>>()))
            .collect();
        let image = mean_std(&folds.iter().map(|f| f.image_level_accuracy).collect::<Vec<_>>());
        let patient = mean_std(&folds.iter().map(|f| f.patient_level_accuracy).collect::<Vec<_>>());
        Ok(Self {
            folds,
            summary,
            image_level_accuracy: image,
            patient_level_accuracy: patient,
        })
    }

    /// One row per fold plus a `mean` row and a `std` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Fold");
        for c in REPORT_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for f in &self.folds {
            out.push_str(&f.fold.to_string());
            for v in f.row() {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for s in &self.summary {
            out.push_str(&format!(",{:.6}", s.mean));
        }
        out.push('\n');
        out.push_str("std");
        for s in &self.summary {
            out.push_str(&format!(",{:.6}", s.std));
        }
        out.push('\n');
        out
    }
}
