//! TOML run configuration.
//!
//! ```toml
//! [run]
//! seed = 0
//! fold = 0
//! n_folds = 5
//! split_ratios = [0.6, 0.2, 0.2]
//! relax_threshold = 0.5
//! magnification = "all"
//!
//! [data]
//! manifest = "data/manifest.csv"   # omit for the built-in synthetic set
//! synthetic_per_class = 200
//!
//! [stain]    # sparsity_weight, max_iterations, tolerance, rng_seed
//! [augment]  # crop_p, jitter_p, blur_p, geometric_p, hed_p, hed_strength, ...
//! [loss]     # tau, lambda_neg, alpha_mode, loss_combination
//! [encoder]  # input_size, channels, embed_dim
//! [train]    # learning_rate, epochs, batch_size, beta1, beta2, epsilon
//! [finetune] # eta, dropout_p, learning_rate, epochs, batch_size, hidden1, hidden2, aux_sign_mode
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::Magnification;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::losses::LossConfig;
use crate::stain::StainConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "CHL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub fold: usize,
    pub n_folds: usize,
    pub split_ratios: [f64; 3],
    pub relax_threshold: f64,
    /// `all`, or one of 40X, 100X, 200X, 400X, NA.
    pub magnification: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            fold: 0,
            n_folds: 5,
            split_ratios: [0.6, 0.2, 0.2],
            relax_threshold: 0.5,
            magnification: "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Manifest CSV; relative to the config file. Empty means synthetic.
    pub manifest: String,
    pub synthetic_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: String::new(),
            synthetic_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub stain: StainConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, resolving a relative manifest against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if !cfg.data.manifest.is_empty() && Path::new(&cfg.data.manifest).is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.data.manifest = base.join(&cfg.data.manifest).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.stain.validate()?;
        self.loss.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.augment.build(&self.stain)?;
        if !(self.run.relax_threshold > -1.0 && self.run.relax_threshold < 1.0) {
            return Err(Error::Config("run.relax_threshold must lie in (−1, 1)".into()));
        }
        if self.run.n_folds == 0 || self.run.fold >= self.run.n_folds {
            return Err(Error::Config(format!(
                "run.fold {} must be < run.n_folds {}",
                self.run.fold, self.run.n_folds
            )));
        }
        self.magnification()?;
        if self.data.manifest.is_empty() && self.data.synthetic_per_class == 0 {
            return Err(Error::Config("data.synthetic_per_class must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn magnification(&self) -> Result<Option<Magnification>> {
        if self.run.magnification.eq_ignore_ascii_case("all") {
            return Ok(None);
        }
        self.run
            .magnification
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("unknown magnification `{}`", self.run.magnification)))
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        (!self.data.manifest.is_empty()).then(|| PathBuf::from(&self.data.manifest))
    }

    /// Fully expanded TOML, every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
