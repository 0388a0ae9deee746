//! Manifests, patient-grouped splits and the synthetic H&E-like dataset.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::rng_for;
use crate::train::shuffled_indices;

pub const MANIFEST_HEADER: [&str; 5] = ["path", "label", "patient_id", "magnification", "fold"];

/// An image with its label (0 benign, 1 malignant) and patient.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: ImageTensor,
    pub label: usize,
    pub patient_id: String,
}

pub fn parse_label(s: &str) -> Option<usize> {
    match s.trim().to_ascii_lowercase().as_str() {
        "benign" => Some(0),
        "malignant" => Some(1),
        _ => None,
    }
}

pub fn label_name(label: usize) -> &'static str {
    if label == 1 {
        "malignant"
    } else {
        "benign"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Magnification {
    X40,
    X100,
    X200,
    X400,
    NotApplicable,
}

impl FromStr for Magnification {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_uppercase().as_str() {
            "40X" => Ok(Self::X40),
            "100X" => Ok(Self::X100),
            "200X" => Ok(Self::X200),
            "400X" => Ok(Self::X400),
            "NA" | "" => Ok(Self::NotApplicable),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::X40 => "40X",
            Self::X100 => "100X",
            Self::X200 => "200X",
            Self::X400 => "400X",
            Self::NotApplicable => "NA",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Path as written in the manifest; also the item id.
    pub path: String,
    pub label: usize,
    pub patient_id: String,
    pub magnification: Magnification,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    label: String,
    patient_id: String,
    magnification: String,
    #[serde(default)]
    fold: String,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, &base_dir)?;
    for (row, r) in manifest.records.iter().enumerate() {
        if !manifest.resolve(r).is_file() {
            return Err(Error::Data(format!("manifest row {}: file `{}` not found", row + 1, r.path)));
        }
    }
    Ok(manifest)
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("manifest header: {e}")))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names != MANIFEST_HEADER && names != MANIFEST_HEADER[..4] {
        return Err(Error::Data(format!(
            "manifest header must be `{}`, got `{}`",
            MANIFEST_HEADER.join(","),
            names.join(",")
        )));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<RawRow>().enumerate() {
        let row_no = i + 1;
        let raw = row.map_err(|e| Error::Data(format!("manifest row {row_no}: {e}")))?;
        let label = parse_label(&raw.label)
            .ok_or_else(|| Error::Data(format!("manifest row {row_no}: bad label `{}`", raw.label)))?;
        if raw.patient_id.is_empty() {
            return Err(Error::Data(format!("manifest row {row_no}: empty patient_id")));
        }
        if raw.path.is_empty() {
            return Err(Error::Data(format!("manifest row {row_no}: empty path")));
        }
        let magnification = raw.magnification.parse().map_err(|_| {
            Error::Data(format!(
                "manifest row {row_no}: bad magnification `{}`",
                raw.magnification
            ))
        })?;
        let fold = match raw.fold.as_str() {
            "" => None,
            f => {
                let k: usize = f
                    .parse()
                    .map_err(|_| Error::Data(format!("manifest row {row_no}: bad fold `{f}`")))?;
                if k > 4 {
                    return Err(Error::Data(format!("manifest row {row_no}: fold {k} outside 0..4")));
                }
                Some(k)
            }
        };
        if !seen.insert(raw.path.clone()) {
            return Err(Error::Data(format!("manifest row {row_no}: duplicate path `{}`", raw.path)));
        }
        records.push(ManifestRecord {
            path: raw.path,
            label,
            patient_id: raw.patient_id,
            magnification,
            fold,
        });
    }
    if records.is_empty() {
        return Err(Error::Data("manifest has no rows".into()));
    }
    Ok(DatasetManifest {
        base_dir: base_dir.to_path_buf(),
        records,
    })
}

impl DatasetManifest {
    pub fn resolve(&self, r: &ManifestRecord) -> PathBuf {
        let p = Path::new(&r.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct patient ids.
    pub fn patients(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.patient_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn filter_magnification(&self, m: Magnification) -> Result<Self> {
        let records: Vec<_> = self.records.iter().filter(|r| r.magnification == m).cloned().collect();
        if records.is_empty() {
            return Err(Error::Data(format!("no manifest rows at magnification {m}")));
        }
        Ok(Self {
            base_dir: self.base_dir.clone(),
            records,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.records {
            let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([
                r.path.as_str(),
                label_name(r.label),
                r.patient_id.as_str(),
                &r.magnification.to_string(),
                &fold,
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Decodes every image and resizes it to `size × size`.
    pub fn load_images(&self, size: usize) -> Result<Vec<LabeledImage>> {
        self.records
            .iter()
            .map(|r| {
                let mut image = ImageTensor::load_png(&self.resolve(r))?;
                if image.height() != size || image.width() != size {
                    image = image.resize_bilinear(size, size);
                }
                Ok(LabeledImage {
                    id: r.path.clone(),
                    image,
                    label: r.label,
                    patient_id: r.patient_id.clone(),
                })
            })
            .collect()
    }
}

/// Indices into the manifest records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Patient-disjoint train/val/test splits.
///
/// When every record carries a fold id, fold `k` is tested on fold `k`,
/// validated on fold `k + 1 (mod n)` and trained on the rest. Otherwise each
/// fold is an independent seeded resampling of patients with
/// `round(P · ratio)` patients in val and test.
pub fn split_folds(
    manifest: &DatasetManifest,
    n_folds: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    validate_ratios(ratios)?;
    if n_folds == 0 {
        return Err(Error::Config("n_folds must be ≥ 1".into()));
    }
    let patients = manifest.patients();
    if patients.len() < n_folds {
        return Err(Error::Data(format!(
            "{} patients cannot fill {n_folds} folds",
            patients.len()
        )));
    }
    if manifest.records.iter().all(|r| r.fold.is_some()) {
        return rotate_folds(manifest, n_folds);
    }
    let p = patients.len();
    let n_test = ((p as f64 * ratios[2]).round() as usize).max(1);
    let n_val = ((p as f64 * ratios[1]).round() as usize).max(1);
    if n_test + n_val >= p {
        return Err(Error::Data(format!(
            "{p} patients leave no training patients after the val/test split"
        )));
    }
    let mut folds = Vec::with_capacity(n_folds);
    for k in 0..n_folds {
        let order = shuffled_indices(p, &mut rng_for(seed, &[0x5917, k as u64]));
        let mut role = BTreeMap::new();
        for (rank, &pi) in order.iter().enumerate() {
            let r = if rank < n_test {
                2
            } else if rank < n_test + n_val {
                1
            } else {
                0
            };
            role.insert(patients[pi].as_str(), r);
        }
        folds.push(assign(manifest, |r| role[r.patient_id.as_str()]));
    }
    Ok(folds)
}

fn validate_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {r:?}"
        )));
    }
    Ok(())
}

fn rotate_folds(manifest: &DatasetManifest, n_folds: usize) -> Result<Vec<FoldSplit>> {
    let mut fold_of = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let f = r.fold.expect("checked");
        if f >= n_folds {
            return Err(Error::Data(format!("manifest row {}: fold {f} ≥ n_folds {n_folds}", i + 1)));
        }
        if *fold_of.entry(r.patient_id.as_str()).or_insert(f) != f {
            return Err(Error::Data(format!(
                "patient `{}` appears in more than one fold",
                r.patient_id
            )));
        }
    }
    Ok((0..n_folds)
        .map(|k| {
            assign(manifest, |r| {
                let f = r.fold.unwrap();
                if f == k {
                    2
                } else if f == (k + 1) % n_folds {
                    1
                } else {
                    0
                }
            })
        })
        .collect())
}

fn assign(manifest: &DatasetManifest, role: impl Fn(&ManifestRecord) -> u8) -> FoldSplit {
    let mut split = FoldSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in manifest.records.iter().enumerate() {
        match role(r) {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    split
}

/// Stain basis used to render the synthetic images (columns: hematoxylin, eosin).
pub const SYNTHETIC_STAIN_BASIS: [[f64; 2]; 3] = [[0.644, 0.093], [0.717, 0.954], [0.267, 0.283]];

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<ImageTensor>,
    pub manifest: DatasetManifest,
}

impl SyntheticDataset {
    pub fn labeled(&self) -> Vec<LabeledImage> {
        self.images
            .iter()
            .zip(&self.manifest.records)
            .map(|(img, r)| LabeledImage {
                id: r.path.clone(),
                image: img.clone(),
                label: r.label,
                patient_id: r.patient_id.clone(),
            })
            .collect()
    }

    /// Writes `images/*.png` and `manifest.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (img, r) in self.images.iter().zip(&self.manifest.records) {
            img.save_png(&dir.join(&r.path))?;
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, self.manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

struct Nucleus {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

/// Two texture classes rendered through [`SYNTHETIC_STAIN_BASIS`]:
/// benign tiles carry a few large round nuclei, malignant tiles many small,
/// elongated, darker ones. Every 4 consecutive images of a class share a
/// patient, and each patient gets its own stain intensity scaling.
pub fn generate_synthetic_dataset(n_per_class: usize, image_size: usize, seed: u64) -> Result<SyntheticDataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be ≥ 1".into()));
    }
    if image_size < 8 {
        return Err(Error::Config("synthetic image_size must be ≥ 8".into()));
    }
    let mut images = Vec::with_capacity(2 * n_per_class);
    let mut records = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for label in 0..2 {
            let patient = i / 4;
            let mut prng = rng_for(seed, &[0xDA7A, label as u64, patient as u64]);
            let stain_scale = [prng.gen_range(0.85..1.15), prng.gen_range(0.85..1.15)];
            let mut rng = rng_for(seed, &[0x1A6E, label as u64, i as u64]);
            images.push(render_tile(label, image_size, stain_scale, &mut rng));
            records.push(ManifestRecord {
                path: format!("images/{}_{i:04}.png", label_name(label)),
                label,
                patient_id: format!("{}-P{patient:03}", label_name(label)),
                magnification: Magnification::NotApplicable,
                fold: None,
            });
        }
    }
    Ok(SyntheticDataset {
        images,
        manifest: DatasetManifest {
            base_dir: PathBuf::new(),
            records,
        },
    })
}

fn render_tile<R: Rng>(label: usize, size: usize, stain_scale: [f64; 2], rng: &mut R) -> ImageTensor {
    let s = size as f64 / 32.0;
    let (count, radius, elongation, density) = if label == 0 {
        (rng.gen_range(3..=5), (3.5 * s, 5.0 * s), (1.0, 1.25), 0.75)
    } else {
        (rng.gen_range(10..=16), (1.5 * s, 2.5 * s), (1.6, 2.6), 1.25)
    };
    let nuclei: Vec<Nucleus> = (0..count)
        .map(|_| {
            let r = rng.gen_range(radius.0..radius.1);
            let e: f64 = rng.gen_range(elongation.0..elongation.1);
            Nucleus {
                cy: rng.gen_range(0.0..size as f64),
                cx: rng.gen_range(0.0..size as f64),
                ry: r * e.sqrt(),
                rx: r / e.sqrt(),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    let mut conc = Array2::<f64>::zeros((size * size, 2));
    for y in 0..size {
        for x in 0..size {
            let mut h: f64 = 0.0;
            for n in &nuclei {
                let (dy, dx) = (y as f64 + 0.5 - n.cy, x as f64 + 0.5 - n.cx);
                let (sa, ca) = n.angle.sin_cos();
                let u = (ca * dx + sa * dy) / n.rx;
                let v = (-sa * dx + ca * dy) / n.ry;
                let d2 = u * u + v * v;
                if d2 < 1.0 {
                    h = h.max(density * (1.0 - 0.3 * d2));
                }
            }
            let e = 0.35 + 0.08 * ((x as f64 * 0.7 / s).sin() * (y as f64 * 0.5 / s).cos());
            let p = y * size + x;
            conc[[p, 0]] = stain_scale[0] * (h + rng.gen_range(0.0..0.04));
            conc[[p, 1]] = stain_scale[1] * (e + rng.gen_range(-0.03..0.03)).max(0.0);
        }
    }
    ImageTensor::from_fn(size, size, |y, x, c| {
        let p = y * size + x;
        let od = SYNTHETIC_STAIN_BASIS[c][0] * conc[[p, 0]] + SYNTHETIC_STAIN_BASIS[c][1] * conc[[p, 1]];
        (255.0 * (-od).exp()).round()
    })
}

/// Selects `indices` from `all`.
pub fn subset(all: &[LabeledImage], indices: &[usize]) -> Vec<LabeledImage> {
    indices.iter().map(|&i| all[i].clone()).collect()
}
