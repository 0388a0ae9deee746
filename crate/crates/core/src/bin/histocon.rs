use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use histocon::checkpoint::{Checkpoint, Stage};
use histocon::config::{RunConfig, SEED_ENV};
use histocon::data::{generate_synthetic_dataset, load_manifest, LabeledImage};
use histocon::finetune::Classifier;
use histocon::losses::LossCombination;
use histocon::metrics::{FoldMetrics, MetricsReport};
use histocon::pairs::PairsFile;
use histocon::pipeline::{
    contrastive_stage, evaluation_records, finetune_stage, prepare_data, relax_stage, run_ablation, run_pipeline,
    write_finetune_csv, write_losses_csv, write_predictions_csv, write_report, PipelineOptions, SIMILARITY_CACHE,
};
use histocon::rng::seeded;
use histocon::stain::{estimate_stains, hed_augment, rgb_to_od, StainConfig};
use histocon::{Error, ImageTensor, Result};

/// Staged supervised contrastive learning for H&E images.
///
/// Config files are TOML with sections [run], [data], [stain], [augment],
/// [loss], [encoder], [train] and [finetune]; every key is optional and
/// `run --config` writes the fully resolved file next to its outputs.
///
/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
#[derive(Parser)]
#[command(name = "histocon", version, about, long_about)]
struct Cli {
    /// Overrides `run.seed` from the config.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic two-class dataset (PNG tiles + manifest.csv).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Contrastive training on the configured training split.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (required with --pairs).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Relaxed pairs from `relax`; produces a relax-stage checkpoint.
        #[arg(long, requires = "init")]
        pairs: Option<PathBuf>,
    },
    /// Computes training-set similarities and writes the relaxed pairs file.
    Relax {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes classifier and auxiliary heads from a relax checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accept a pretrain checkpoint (no-relax baseline).
        #[arg(long)]
        skip_relax: bool,
    },
    /// Scores a finetune checkpoint on a manifest, one row per fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the pipeline once per loss combination comb1..comb7.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stain utilities.
    Stain {
        #[command(subcommand)]
        command: StainCommand,
    },
    /// Writes HED-augmented and positive-pair previews of an image.
    AugmentPreview {
        image: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        strength: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: pretrain, relax, retrain, finetune, eval.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        skip_relax: bool,
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Subcommand)]
enum StainCommand {
    /// Separates hematoxylin and eosin and writes both plus the reconstruction.
    Separate {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn optional_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p, seed),
        None => Ok(RunConfig::default().with_seed(seed)),
    }
}

/// Writes `<out>.resolved.toml` next to a file output.
fn write_resolved_beside(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".resolved.toml");
    let path = out.with_file_name(name);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::SynthData { out, per_class, size } => {
            let ds = generate_synthetic_dataset(per_class, size, seed.unwrap_or(0))?;
            let path = ds.write(&out)?;
            println!("wrote {} images and {}", ds.images.len(), path.display());
        }
        Command::Pretrain {
            config,
            out,
            init,
            pairs,
        } => {
            let cfg = load_config(&config, seed)?;
            ensure_parent(&out)?;
            write_resolved_beside(&cfg, &out)?;
            let data = prepare_data(&cfg)?;
            let train = data.train();
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let relaxed = match &pairs {
                Some(p) => {
                    let ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
                    Some(PairsFile::load(p)?.to_relaxed(&ids)?)
                }
                None => None,
            };
            let o = contrastive_stage(&cfg, &train, init.as_ref(), relaxed.as_ref())
                .map_err(|e| e.in_stage(if pairs.is_some() { "retrain" } else { "pretrain" }))?;
            o.checkpoint.save(&out)?;
            write_losses_csv(&out.with_extension("losses.csv"), &o.epoch_losses)?;
            println!("{} checkpoint {} ({})", o.checkpoint.stage, out.display(), o.checkpoint.hash_hex());
        }
        Command::Relax {
            config,
            checkpoint,
            threshold,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            ensure_parent(&out)?;
            write_resolved_beside(&cfg, &out)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            ckpt.expect_stage(&[Stage::Pretrain])?;
            let train = prepare_data(&cfg)?.train();
            let cache = out.with_file_name(SIMILARITY_CACHE);
            let (relaxed, file) = relax_stage(
                &train,
                &ckpt,
                threshold.unwrap_or(cfg.run.relax_threshold),
                Some(&cache),
            )
            .map_err(|e| e.in_stage("relax"))?;
            file.save(&out)?;
            println!(
                "removed {} positive / {} negative pairs; wrote {}",
                relaxed.removed_positive_count(),
                relaxed.removed_negative_count(),
                out.display()
            );
        }
        Command::Finetune {
            config,
            checkpoint,
            out,
            skip_relax,
        } => {
            let cfg = load_config(&config, seed)?;
            ensure_parent(&out)?;
            write_resolved_beside(&cfg, &out)?;
            let init = Checkpoint::load(&checkpoint)?;
            let data = prepare_data(&cfg)?;
            let (ckpt, history) = finetune_stage(&cfg, &data.train(), &data.val(), &init, skip_relax)
                .map_err(|e| e.in_stage("finetune"))?;
            ckpt.save(&out)?;
            let csv = out.with_extension("epochs.csv");
            write_finetune_csv(&csv, &history)?;
            print!("{}", std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?);
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            ensure_parent(&out)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = Classifier::from_checkpoint(&ckpt)?;
            let manifest = load_manifest(&manifest)?;
            let images = manifest.load_images(ckpt.encoder_config.input_size)?;
            let mut by_fold: BTreeMap<usize, Vec<LabeledImage>> = BTreeMap::new();
            for (img, r) in images.into_iter().zip(&manifest.records) {
                by_fold.entry(r.fold.unwrap_or(0)).or_default().push(img);
            }
            let mut folds = Vec::new();
            let mut all = Vec::new();
            for (fold, data) in &by_fold {
                let records = evaluation_records(&model, data, &manifest, *fold)?;
                folds.push(FoldMetrics::from_records(*fold, &records)?);
                all.extend(records);
            }
            let report = MetricsReport::from_folds(folds)?;
            write_report(&out, &report)?;
            write_predictions_csv(&out.with_extension("predictions.csv"), &all)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config, seed)?;
            let table = run_ablation(&cfg, &out, &LossCombination::ABLATION)?;
            print!("{}", table.to_csv());
        }
        Command::Stain {
            command: StainCommand::Separate { image, out, config },
        } => {
            let cfg = optional_config(config.as_deref(), seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            cfg.write_resolved(&out)?;
            let img = ImageTensor::load_png(&image)?;
            let fit = estimate_stains(&rgb_to_od(&img), &cfg.stain)?;
            fit.model.stain_image(0).save_png(&out.join("hematoxylin.png"))?;
            fit.model.stain_image(1).save_png(&out.join("eosin.png"))?;
            fit.model.reconstruct().save_png(&out.join("reconstruction.png"))?;
            let w = fit.model.w_row_major();
            let text = format!(
                "W (rows R,G,B; columns hematoxylin, eosin)\n{:.6} {:.6}\n{:.6} {:.6}\n{:.6} {:.6}\nobjective {:.6}\niterations {}\nconverged {}\n",
                w[0], w[1], w[2], w[3], w[4], w[5],
                fit.objective(),
                fit.iterations,
                fit.converged
            );
            std::fs::write(out.join("stain.txt"), &text).map_err(|e| Error::io(&out, e))?;
            print!("{text}");
        }
        Command::AugmentPreview {
            image,
            strength,
            config,
            out,
        } => {
            let mut cfg = optional_config(config.as_deref(), seed)?;
            cfg.augment.hed_strength = strength;
            cfg.validate()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            cfg.write_resolved(&out)?;
            let img = ImageTensor::load_png(&image)?;
            let mut rng = seeded(cfg.run.seed);
            let hed_cfg: StainConfig = cfg.augment.hed_stain_config(&cfg.stain);
            hed_augment(&img, &hed_cfg, strength, &mut rng)?.save_png(&out.join("hed.png"))?;
            let (a, b) = cfg.augment.build(&cfg.stain)?.positive_pair(&img, &mut rng)?;
            a.save_png(&out.join("view1.png"))?;
            b.save_png(&out.join("view2.png"))?;
            println!("wrote hed.png, view1.png, view2.png to {}", out.display());
        }
        Command::Run {
            config,
            out,
            skip_relax,
            resume,
        } => {
            let cfg = load_config(&config, seed)?;
            let result = run_pipeline(&cfg, &out, PipelineOptions { skip_relax, resume })?;
            print!("{}", result.report.to_csv());
            println!("checkpoint {}", result.checkpoint.hash_hex());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
