//! Training-run configuration, read from TOML.
//!
//! Every field has a default. Relative paths are resolved against the
//! directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::perturb::{AugConfig, CutMixConfig, FourierConfig, PerturbKind, Perturbation};

/// Model architecture knobs; the init seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub zero_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            widths: vec![16, 32, 64],
            zero_head: false,
        }
    }
}

/// SGD settings; the schedule length is the run's `max_iter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        // The toy network trains from scratch with one image pair per step,
        // so it needs a far larger step than a pretrained backbone would.
        OptimSection {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5.0e-4,
            power: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    /// Perturbations applied left to right to the target pair.
    pub chain: Vec<PerturbKind>,
    pub augment: AugConfig,
    pub cutmix: CutMixConfig,
    pub fourier: FourierConfig,
}

impl Default for PerturbSection {
    fn default() -> Self {
        PerturbSection {
            chain: vec![PerturbKind::Augment],
            augment: AugConfig::default(),
            cutmix: CutMixConfig::default(),
            fourier: FourierConfig::default(),
        }
    }
}

impl PerturbSection {
    pub fn build(&self) -> Vec<Perturbation> {
        self.chain
            .iter()
            .map(|k| match k {
                PerturbKind::Identity => Perturbation::Identity,
                PerturbKind::Augment => Perturbation::Augment(self.augment.clone()),
                PerturbKind::Cutmix => Perturbation::CutMix(self.cutmix.clone()),
                PerturbKind::Fourier => Perturbation::Fourier(self.fourier.clone()),
                PerturbKind::Style => Perturbation::Style,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub max_iter: usize,
    pub eval_every: usize,
    /// When set, must agree with the manifests.
    pub num_classes: Option<usize>,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub loss: LossWeights,
    pub perturb: PerturbSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            source_manifest: PathBuf::from("data/source.manifest"),
            target_manifest: PathBuf::from("data/target.manifest"),
            out_dir: PathBuf::from("run"),
            seed: 0,
            max_iter: 5000,
            eval_every: 500,
            num_classes: None,
            model: ModelSection::default(),
            optim: OptimSection::default(),
            loss: LossWeights::default(),
            perturb: PerturbSection::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Reads a config and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.source_manifest, &mut self.target_manifest, &mut self.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return Err(Error::Config("model widths must be non-empty and positive".into()));
        }
        self.optim_config().validate()?;
        self.loss.validate()?;
        self.perturb.augment.validate()?;
        self.perturb.cutmix.validate()?;
        self.perturb.fourier.validate()?;
        if self.loss.lambda_t > 0.0 && self.perturb.chain.is_empty() {
            return Err(Error::Config("lambda_t > 0 needs at least one perturbation in the chain".into()));
        }
        if self.loss.lambda_t > 0.0 && self.perturb.chain.contains(&PerturbKind::Style) {
            return Err(Error::Unsupported(
                "style perturbation needs an external style-transfer model".into(),
            ));
        }
        Ok(())
    }

    pub fn optim_config(&self) -> crate::segnet::OptimConfig {
        crate::segnet::OptimConfig {
            base_lr: self.optim.base_lr,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            power: self.optim.power,
            max_iter: self.max_iter,
        }
    }

    pub fn model_config(&self) -> crate::segnet::ModelConfig {
        crate::segnet::ModelConfig {
            widths: self.model.widths.clone(),
            init_seed: self.seed,
            zero_head: self.model.zero_head,
        }
    }
}
