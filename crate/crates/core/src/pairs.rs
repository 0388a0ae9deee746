//! Positive/negative pair sets, the cosine similarity matrix, and relaxing.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on ‖z‖ − 1 for rows treated as unit embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Per-anchor positive set `P(i)` and negative set `Q(i)`, plus the
/// augmentation partner of each row when the rows are views of source images.
///
/// Sets are kept sorted and never contain the anchor itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
    partner: Vec<Option<usize>>,
}

impl PairSets {
    pub fn new(
        mut positives: Vec<Vec<usize>>,
        mut negatives: Vec<Vec<usize>>,
        partner: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = positives.len();
        if negatives.len() != n || partner.len() != n {
            return Err(Error::Shape("pair set lengths disagree".into()));
        }
        for i in 0..n {
            positives[i].sort_unstable();
            positives[i].dedup();
            negatives[i].sort_unstable();
            negatives[i].dedup();
            let p = &positives[i];
            let q = &negatives[i];
            if p.iter().chain(q.iter()).any(|&k| k == i || k >= n) {
                return Err(Error::Shape(format!("pair sets of anchor {i} reference itself or out-of-range rows")));
            }
            if p.iter().any(|k| q.binary_search(k).is_ok()) {
                return Err(Error::Shape(format!("P({i}) and Q({i}) overlap")));
            }
            if let Some(j) = partner[i] {
                if j == i || j >= n {
                    return Err(Error::Shape(format!("invalid partner {j} for row {i}")));
                }
            }
        }
        Ok(Self {
            positives,
            negatives,
            partner,
        })
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    pub fn negatives(&self, i: usize) -> &[usize] {
        &self.negatives[i]
    }

    pub fn partner(&self, i: usize) -> Option<usize> {
        self.partner[i]
    }

    pub fn is_positive(&self, i: usize, k: usize) -> bool {
        self.positives[i].binary_search(&k).is_ok()
    }

    pub fn total_positives(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn total_negatives(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }

    /// Relabels rows: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let map = |v: &Vec<usize>| v.iter().map(|&k| inverse[k]).collect::<Vec<_>>();
        Self::new(
            perm.iter().map(|&old| map(&self.positives[old])).collect(),
            perm.iter().map(|&old| map(&self.negatives[old])).collect(),
            perm.iter().map(|&old| self.partner[old].map(|j| inverse[j])).collect(),
        )
        .expect("permutation preserves validity")
    }
}

/// Partner of each row: the other row sharing its source image.
pub fn partners_from_sources(source_index: &[usize]) -> Vec<Option<usize>> {
    (0..source_index.len())
        .map(|i| (0..source_index.len()).find(|&j| j != i && source_index[j] == source_index[i]))
        .collect()
}

/// `P(i)` = same label, `Q(i)` = different label; together they partition `A(i)`.
pub fn build_pair_sets(labels: &[usize], source_index: &[usize]) -> Result<PairSets> {
    if labels.len() != source_index.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            source_index.len()
        )));
    }
    let n = labels.len();
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect())
        .collect();
    let negatives: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| labels[j] != labels[i]).collect())
        .collect();
    if n > 0 && negatives.iter().all(Vec::is_empty) {
        log::debug!("single-class batch of {n} rows: every negative set is empty");
    }
    PairSets::new(positives, negatives, partners_from_sources(source_index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Wraps a precomputed matrix after checking the invariants
    /// (square, symmetric, unit diagonal, entries in [−1, 1]).
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let m = values.nrows();
        if values.ncols() != m {
            return Err(Error::Shape("similarity matrix must be square".into()));
        }
        for i in 0..m {
            if (values[[i, i]] - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("similarity diagonal at {i} is {}", values[[i, i]])));
            }
            for j in 0..m {
                let v = values[[i, j]];
                if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&v) || (v - values[[j, i]]).abs() > 1e-6 {
                    return Err(Error::Data(format!("similarity entry ({i}, {j}) = {v} violates invariants")));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn save_cache(&self, path: &Path, checkpoint_hash: &[u8; 32]) -> Result<()> {
        let m = self.size();
        let mut buf = Vec::with_capacity(48 + 4 * m * m);
        buf.extend_from_slice(SIM_MAGIC);
        buf.extend_from_slice(&SIM_VERSION.to_le_bytes());
        buf.extend_from_slice(&(m as u64).to_le_bytes());
        buf.extend_from_slice(checkpoint_hash);
        for v in self.values.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    /// Loads a cache file; returns `Ok(None)` when it belongs to a different checkpoint.
    pub fn load_cache(path: &Path, checkpoint_hash: &[u8; 32]) -> Result<Option<Self>> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Data(format!("similarity cache {}: {msg}", path.display()));
        if buf.len() < 52 || &buf[..8] != SIM_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != SIM_VERSION {
            return Err(bad("unsupported version"));
        }
        let m = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        if &buf[20..52] != checkpoint_hash {
            return Ok(None);
        }
        if buf.len() != 52 + 4 * m * m {
            return Err(bad("truncated"));
        }
        let values = Array2::from_shape_fn((m, m), |(i, j)| {
            let o = 52 + 4 * (i * m + j);
            f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64
        });
        Ok(Some(Self { values }))
    }
}

const SIM_MAGIC: &[u8; 8] = b"HCSIM\0\0\x01";
const SIM_VERSION: u32 = 1;

pub fn check_unit_rows(z: ArrayView2<f64>) -> Result<()> {
    for (row, r) in z.rows().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Row blocks of this many rows are filled per pass.
const SIM_BLOCK: usize = 256;

/// `S = Z Zᵀ` over unit-norm rows, symmetrized with exact unit diagonal.
pub fn compute_similarity_matrix(z: ArrayView2<f64>) -> Result<SimilarityMatrix> {
    check_unit_rows(z)?;
    let m = z.nrows();
    let mut values = Array2::zeros((m, m));
    for start in (0..m).step_by(SIM_BLOCK) {
        let end = (start + SIM_BLOCK).min(m);
        let block = z.slice(ndarray::s![start..end, ..]).dot(&z.t());
        for i in start..end {
            for j in i..m {
                let v = if i == j { 1.0 } else { block[[i - start, j]].clamp(-1.0, 1.0) };
                values[[i, j]] = v;
                values[[j, i]] = v;
            }
        }
    }
    Ok(SimilarityMatrix { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxReport {
    pub threshold: f64,
    pub removed_positives: Vec<Vec<usize>>,
    pub removed_negatives: Vec<Vec<usize>>,
}

impl RelaxReport {
    pub fn total_removed_positives(&self) -> usize {
        self.removed_positives.iter().map(Vec::len).sum()
    }

    pub fn total_removed_negatives(&self) -> usize {
        self.removed_negatives.iter().map(Vec::len).sum()
    }
}

pub const DEFAULT_RELAX_THRESHOLD: f64 = 0.5;

/// Dataset-level relaxing must leave at least one positive pair.
pub fn ensure_positives_remain(original: &PairSets, relaxed: &PairSets, threshold: f64) -> Result<()> {
    if original.total_positives() > 0 && relaxed.total_positives() == 0 {
        return Err(Error::Data(format!(
            "relaxing at {threshold} removed every positive pair in the training set"
        )));
    }
    Ok(())
}

/// Keeps positives with `S ≥ threshold` and negatives with `S ≤ threshold`.
/// Augmentation partners are never removed.
pub fn relax_pair_sets(
    pairs: &PairSets,
    sim: &SimilarityMatrix,
    threshold: f64,
) -> Result<(PairSets, RelaxReport)> {
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::Config(format!("relax threshold {threshold} must lie in (−1, 1)")));
    }
    if sim.size() < pairs.len() {
        return Err(Error::Shape(format!(
            "similarity matrix of size {} does not cover {} anchors",
            sim.size(),
            pairs.len()
        )));
    }
    let n = pairs.len();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    let mut removed_positives = Vec::with_capacity(n);
    let mut removed_negatives = Vec::with_capacity(n);
    for i in 0..n {
        let partner = pairs.partner(i);
        let (keep_p, drop_p): (Vec<usize>, Vec<usize>) = pairs
            .positives(i)
            .iter()
            .partition(|&&p| Some(p) == partner || sim.get(i, p) >= threshold);
        let (keep_q, drop_q): (Vec<usize>, Vec<usize>) = pairs
            .negatives(i)
            .iter()
            .partition(|&&q| Some(q) == partner || sim.get(i, q) <= threshold);
        positives.push(keep_p);
        negatives.push(keep_q);
        removed_positives.push(drop_p);
        removed_negatives.push(drop_q);
    }
    let relaxed = PairSets::new(positives, negatives, pairs.partner.clone())?;
    Ok((
        relaxed,
        RelaxReport {
            threshold,
            removed_positives,
            removed_negatives,
        },
    ))
}

/// Dataset-level relaxation result, restricted to batches on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPairs {
    /// `(anchor, other)` dataset-index pairs removed from `P`.
    removed_positive: BTreeSet<(usize, usize)>,
    /// `(anchor, other)` dataset-index pairs removed from `Q`.
    removed_negative: BTreeSet<(usize, usize)>,
}

impl RelaxedPairs {
    pub fn none() -> Self {
        Self {
            removed_positive: BTreeSet::new(),
            removed_negative: BTreeSet::new(),
        }
    }

    /// `items[k]` is the dataset index of row `k` of the relaxed pair sets.
    pub fn from_report(report: &RelaxReport, items: &[usize]) -> Self {
        let mut out = Self::none();
        for (a, removed) in report.removed_positives.iter().enumerate() {
            for &b in removed {
                out.removed_positive.insert((items[a], items[b]));
            }
        }
        for (a, removed) in report.removed_negatives.iter().enumerate() {
            for &b in removed {
                out.removed_negative.insert((items[a], items[b]));
            }
        }
        out
    }

    pub fn removed_positive_count(&self) -> usize {
        self.removed_positive.len()
    }

    pub fn removed_negative_count(&self) -> usize {
        self.removed_negative.len()
    }

    /// Batch-level pair sets: full label pairing, minus removed dataset pairs.
    /// Rows sharing a source image (augmentation views) are always positives.
    pub fn restrict(&self, labels: &[usize], source_index: &[usize]) -> Result<PairSets> {
        let full = build_pair_sets(labels, source_index)?;
        if self.removed_positive.is_empty() && self.removed_negative.is_empty() {
            return Ok(full);
        }
        let n = labels.len();
        let mut positives = Vec::with_capacity(n);
        let mut negatives = Vec::with_capacity(n);
        for i in 0..n {
            let si = source_index[i];
            positives.push(
                full.positives(i)
                    .iter()
                    .copied()
                    .filter(|&k| {
                        source_index[k] == si || !self.removed_positive.contains(&(si, source_index[k]))
                    })
                    .collect(),
            );
            negatives.push(
                full.negatives(i)
                    .iter()
                    .copied()
                    .filter(|&k| !self.removed_negative.contains(&(si, source_index[k])))
                    .collect(),
            );
        }
        PairSets::new(positives, negatives, full.partner.clone())
    }
}

/// Structured-text (JSON) listing of removals per item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsFile {
    pub threshold: f64,
    pub checkpoint_hash: String,
    pub items: Vec<PairsFileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsFileEntry {
    pub id: String,
    pub removed_positives: Vec<String>,
    pub removed_negatives: Vec<String>,
}

impl PairsFile {
    pub fn from_report(report: &RelaxReport, ids: &[String], checkpoint_hash: &str) -> Self {
        let items = ids
            .iter()
            .enumerate()
            .map(|(i, id)| PairsFileEntry {
                id: id.clone(),
                removed_positives: report.removed_positives[i].iter().map(|&k| ids[k].clone()).collect(),
                removed_negatives: report.removed_negatives[i].iter().map(|&k| ids[k].clone()).collect(),
            })
            .collect();
        Self {
            threshold: report.threshold,
            checkpoint_hash: checkpoint_hash.to_string(),
            items,
        }
    }

    /// Resolves ids against `all_ids` (dataset index = position).
    pub fn to_relaxed(&self, all_ids: &[String]) -> Result<RelaxedPairs> {
        let index: std::collections::HashMap<&str, usize> =
            all_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Data(format!("pairs file references unknown item `{id}`")))
        };
        let mut out = RelaxedPairs::none();
        for entry in &self.items {
            let a = lookup(&entry.id)?;
            for id in &entry.removed_positives {
                out.removed_positive.insert((a, lookup(id)?));
            }
            for id in &entry.removed_negatives {
                out.removed_negative.insert((a, lookup(id)?));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
