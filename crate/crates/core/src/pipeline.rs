//! Stage orchestration: pretrain → similarity → relax → retrain → finetune → eval.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{
    generate_synthetic_dataset, load_manifest, split_folds, subset, DatasetManifest, FoldSplit, LabeledImage,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::finetune::{finetune, Classifier, FinetuneEpoch, FinetuneSetup};
use crate::image::ImageTensor;
use crate::losses::LossCombination;
use crate::metrics::{EvaluationRecord, FoldMetrics, MetricsReport};
use crate::pairs::{
    build_pair_sets, compute_similarity_matrix, ensure_positives_remain, relax_pair_sets, PairsFile, RelaxedPairs, SimilarityMatrix,
};
use crate::rng::{derive_seed, rng_for};
use crate::train::{embed_dataset, train_contrastive, TrainConfig, TrainOutcome};

const SEED_DATA: u64 = 10;
const SEED_SPLIT: u64 = 11;
const SEED_INIT: u64 = 12;
const SEED_PRETRAIN: u64 = 13;
const SEED_RETRAIN: u64 = 14;
const SEED_FINETUNE: u64 = 15;

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const RELAX_CKPT: &str = "relax.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const SIMILARITY_CACHE: &str = "similarity.bin";
pub const PAIRS_FILE: &str = "pairs.json";

/// The dataset and the chosen fold.
pub struct PreparedData {
    pub manifest: DatasetManifest,
    pub all: Vec<LabeledImage>,
    pub split: FoldSplit,
    pub fold: usize,
}

impl PreparedData {
    pub fn train(&self) -> Vec<LabeledImage> {
        subset(&self.all, &self.split.train)
    }
    pub fn val(&self) -> Vec<LabeledImage> {
        subset(&self.all, &self.split.val)
    }
    pub fn test(&self) -> Vec<LabeledImage> {
        subset(&self.all, &self.split.test)
    }
}

/// Loads the configured manifest (or generates the synthetic set) and splits it.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let size = cfg.encoder.input_size;
    let (manifest, all) = match cfg.manifest_path() {
        Some(path) => {
            let mut manifest = load_manifest(&path)?;
            if let Some(m) = cfg.magnification()? {
                manifest = manifest.filter_magnification(m)?;
            }
            let images = manifest.load_images(size)?;
            (manifest, images)
        }
        None => {
            let ds = generate_synthetic_dataset(
                cfg.data.synthetic_per_class,
                size,
                derive_seed(cfg.run.seed, &[SEED_DATA]),
            )?;
            let images = ds.labeled();
            (ds.manifest, images)
        }
    };
    let folds = split_folds(
        &manifest,
        cfg.run.n_folds,
        cfg.run.split_ratios,
        derive_seed(cfg.run.seed, &[SEED_SPLIT]),
    )?;
    let split = folds[cfg.run.fold].clone();
    Ok(PreparedData {
        manifest,
        all,
        split,
        fold: cfg.run.fold,
    })
}

fn train_cfg(cfg: &RunConfig, tag: u64) -> TrainConfig {
    TrainConfig {
        rng_seed: derive_seed(cfg.run.seed, &[tag]),
        ..cfg.train
    }
}

/// Contrastive training from random init (`init = None`) or from a checkpoint.
/// With `relaxed` the result is a relax-stage checkpoint.
pub fn contrastive_stage(
    cfg: &RunConfig,
    train: &[LabeledImage],
    init: Option<&Checkpoint>,
    relaxed: Option<&RelaxedPairs>,
) -> Result<TrainOutcome> {
    let (encoder, predecessor) = match init {
        Some(c) => (
            Encoder::from_params(c.encoder_config.clone(), c.encoder_params.clone())?,
            c.hash(),
        ),
        None => (
            Encoder::new(cfg.encoder.clone(), &mut rng_for(cfg.run.seed, &[SEED_INIT]))?,
            [0; 32],
        ),
    };
    let pipeline = cfg.augment.build(&cfg.stain)?;
    let none = RelaxedPairs::none();
    let (stage, tag) = if relaxed.is_some() {
        (Stage::Relax, SEED_RETRAIN)
    } else {
        (Stage::Pretrain, SEED_PRETRAIN)
    };
    train_contrastive(
        train,
        encoder,
        relaxed.unwrap_or(&none),
        &pipeline,
        &cfg.loss,
        &train_cfg(cfg, tag),
        stage,
        predecessor,
    )
}

/// Similarity over the training set under `ckpt` and the dataset-level relaxation.
/// Similarities are rounded to `f32` so cached and fresh runs agree exactly.
pub fn relax_stage(
    train: &[LabeledImage],
    ckpt: &Checkpoint,
    threshold: f64,
    cache: Option<&Path>,
) -> Result<(RelaxedPairs, PairsFile)> {
    let hash = ckpt.hash();
    let cached = match cache {
        Some(p) if p.is_file() => SimilarityMatrix::load_cache(p, &hash)?,
        _ => None,
    };
    let sim = match cached {
        Some(s) => s,
        None => {
            let encoder = Encoder::from_params(ckpt.encoder_config.clone(), ckpt.encoder_params.clone())?;
            let z = embed_dataset(&encoder, train)?;
            let fresh = compute_similarity_matrix(z.view())?;
            let sim = SimilarityMatrix::from_values(fresh.values().mapv(|v| v as f32 as f64))?;
            if let Some(p) = cache {
                sim.save_cache(p, &hash)?;
            }
            sim
        }
    };
    if sim.size() != train.len() {
        return Err(Error::Data("similarity cache does not match the training set".into()));
    }
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let items: Vec<usize> = (0..train.len()).collect();
    let pairs = build_pair_sets(&labels, &items)?;
    let (relaxed, report) = relax_pair_sets(&pairs, &sim, threshold)?;
    ensure_positives_remain(&pairs, &relaxed, threshold)?;
    log::info!(
        "relax @ {threshold}: removed {} positive and {} negative pairs",
        report.total_removed_positives(),
        report.total_removed_negatives()
    );
    let ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    let file = PairsFile::from_report(&report, &ids, &hex::encode(hash));
    Ok((RelaxedPairs::from_report(&report, &items), file))
}

pub fn finetune_stage(
    cfg: &RunConfig,
    train: &[LabeledImage],
    val: &[LabeledImage],
    init: &Checkpoint,
    allow_pretrain_init: bool,
) -> Result<(Checkpoint, Vec<FinetuneEpoch>)> {
    let pipeline = cfg.augment.build(&cfg.stain)?;
    let mut ft = cfg.finetune;
    ft.allow_pretrain_init |= allow_pretrain_init;
    let setup = FinetuneSetup {
        config: &ft,
        pipeline: &pipeline,
        hed_stain: cfg.augment.hed_stain_config(&cfg.stain),
        hed_strength: cfg.augment.hed_strength,
        seed: derive_seed(cfg.run.seed, &[SEED_FINETUNE]),
    };
    let out = finetune(train, val, init, &setup)?;
    Ok((out.checkpoint, out.history))
}

pub fn evaluation_records(
    model: &Classifier,
    data: &[LabeledImage],
    manifest: &DatasetManifest,
    fold: usize,
) -> Result<Vec<EvaluationRecord>> {
    let refs: Vec<&ImageTensor> = data.iter().map(|s| &s.image).collect();
    let pred = model.predict(&refs)?;
    Ok(data
        .iter()
        .zip(pred)
        .map(|(s, p)| EvaluationRecord {
            item_id: s.id.clone(),
            patient_id: s.patient_id.clone(),
            true_label: s.label,
            predicted_label: p,
            fold,
            magnification: manifest
                .records
                .iter()
                .find(|r| r.path == s.id)
                .map(|r| r.magnification.to_string())
                .unwrap_or_else(|| "NA".into()),
        })
        .collect())
}

pub fn write_losses_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l:.8}\n", e + 1));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_finetune_csv(path: &Path, rows: &[FinetuneEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions_csv(path: &Path, records: &[EvaluationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `report.csv` (table layout) and `report.json` (full detail) next to each other.
pub fn write_report(csv_path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(csv_path, report.to_csv()).map_err(|e| Error::io(csv_path, e))?;
    let json_path = csv_path.with_extension("json");
    let text = serde_json::to_string_pretty(report).expect("serializable");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Fine-tune directly from the pretrain checkpoint.
    pub skip_relax: bool,
    /// Reuse persisted stage artifacts whose hash chain checks out.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
    pub records: Vec<EvaluationRecord>,
    pub out_dir: PathBuf,
}

fn reuse(path: &Path, resume: bool, predecessor: Option<&Checkpoint>, stage: Stage) -> Option<Checkpoint> {
    if !resume || !path.is_file() {
        return None;
    }
    let ckpt = Checkpoint::load(path).ok()?;
    if ckpt.stage != stage {
        return None;
    }
    match predecessor {
        Some(p) if ckpt.verify_predecessor(p).is_err() => None,
        _ => {
            log::info!("resuming from {}", path.display());
            Some(ckpt)
        }
    }
}

/// Runs every stage into `out`, persisting each artifact before the next starts.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, opts: PipelineOptions) -> Result<PipelineResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_resolved(out)?;
    let data = prepare_data(cfg).map_err(|e| e.in_stage("data"))?;
    let train = data.train();
    let val = data.val();
    let test = data.test();
    log::info!(
        "fold {}: {} train / {} val / {} test images",
        data.fold,
        train.len(),
        val.len(),
        test.len()
    );

    let pretrain_path = out.join(PRETRAIN_CKPT);
    let pretrain = match reuse(&pretrain_path, opts.resume, None, Stage::Pretrain) {
        Some(c) => c,
        None => {
            let o = contrastive_stage(cfg, &train, None, None).map_err(|e| e.in_stage("pretrain"))?;
            o.checkpoint.save(&pretrain_path)?;
            write_losses_csv(&out.join("pretrain_losses.csv"), &o.epoch_losses)?;
            o.checkpoint
        }
    };

    let finetune_init = if opts.skip_relax {
        pretrain.clone()
    } else {
        let relax_path = out.join(RELAX_CKPT);
        match reuse(&relax_path, opts.resume, Some(&pretrain), Stage::Relax) {
            Some(c) => c,
            None => {
                let (relaxed, file) = relax_stage(
                    &train,
                    &pretrain,
                    cfg.run.relax_threshold,
                    Some(&out.join(SIMILARITY_CACHE)),
                )
                .map_err(|e| e.in_stage("relax"))?;
                file.save(&out.join(PAIRS_FILE))?;
                let o = contrastive_stage(cfg, &train, Some(&pretrain), Some(&relaxed))
                    .map_err(|e| e.in_stage("retrain"))?;
                o.checkpoint.save(&relax_path)?;
                write_losses_csv(&out.join("relax_losses.csv"), &o.epoch_losses)?;
                o.checkpoint
            }
        }
    };

    let finetune_path = out.join(FINETUNE_CKPT);
    let tuned = match reuse(&finetune_path, opts.resume, Some(&finetune_init), Stage::Finetune) {
        Some(c) => c,
        None => {
            let (ckpt, history) = finetune_stage(cfg, &train, &val, &finetune_init, opts.skip_relax)
                .map_err(|e| e.in_stage("finetune"))?;
            ckpt.save(&finetune_path)?;
            write_finetune_csv(&out.join("finetune_epochs.csv"), &history)?;
            ckpt
        }
    };

    verify_chain(&pretrain, (!opts.skip_relax).then_some(&finetune_init), &tuned)?;

    let model = Classifier::from_checkpoint(&tuned).map_err(|e| e.in_stage("eval"))?;
    let records = evaluation_records(&model, &test, &data.manifest, data.fold).map_err(|e| e.in_stage("eval"))?;
    let report = MetricsReport::from_folds(vec![FoldMetrics::from_records(data.fold, &records)?])
        .map_err(|e| e.in_stage("eval"))?;
    write_predictions_csv(&out.join("predictions.csv"), &records)?;
    write_report(&out.join("report.csv"), &report)?;
    Ok(PipelineResult {
        checkpoint: tuned,
        report,
        records,
        out_dir: out.to_path_buf(),
    })
}

/// Checks each checkpoint's predecessor hash against the stage before it.
pub fn verify_chain(pretrain: &Checkpoint, relax: Option<&Checkpoint>, tuned: &Checkpoint) -> Result<()> {
    match relax {
        Some(r) => {
            r.verify_predecessor(pretrain)?;
            tuned.verify_predecessor(r)
        }
        None => tuned.verify_predecessor(pretrain),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub combinations: Vec<LossCombination>,
    pub accuracies: Vec<f64>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method");
        for c in &self.combinations {
            let name = c.name();
            out.push_str(&format!(",Comb{}", name.trim_start_matches("comb")));
        }
        out.push('\n');
        let flags = |pick: fn(bool, bool, bool) -> bool| -> String {
            self.combinations
                .iter()
                .map(|c| match *c {
                    LossCombination::Terms { sup, elim, self_ } if pick(sup, elim, self_) => ",✓",
                    _ => ",",
                })
                .collect()
        };
        out.push_str(&format!("Sup{}\n", flags(|s, _, _| s)));
        out.push_str(&format!("Elim{}\n", flags(|_, e, _| e)));
        out.push_str(&format!("Self{}\n", flags(|_, _, s| s)));
        out.push_str("Accuracy");
        for a in &self.accuracies {
            out.push_str(&format!(",{a:.4}"));
        }
        out.push('\n');
        out
    }
}

/// Full pipeline once per combination on the configured fold; accuracy is
/// test image-level accuracy.
pub fn run_ablation(cfg: &RunConfig, out: &Path, combos: &[LossCombination]) -> Result<AblationTable> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_resolved(out)?;
    let mut accuracies = Vec::with_capacity(combos.len());
    for combo in combos {
        let mut c = cfg.clone();
        c.loss.combination = *combo;
        let result = run_pipeline(&c, &out.join(combo.name()), PipelineOptions::default())?;
        accuracies.push(result.report.folds[0].image_level_accuracy);
    }
    let table = AblationTable {
        combinations: combos.to_vec(),
        accuracies,
    };
    let path = out.join("ablation.csv");
    std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
