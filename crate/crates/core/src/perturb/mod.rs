//! Perturbation functions for (image, pseudolabel) pairs.
//!
//! Every perturbation maps a [`PerturbResult`] to a new one, so they chain.
//! Geometric steps move the label, validity mask and soft target together with
//! the image; photometric steps touch the image only. Functions that mix in
//! source-domain content read it from a [`SourceSample`].

mod augment;
mod cutmix;
pub mod fft;
mod fourier;

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{
    apply_crop, perturb_augment, perturb_augment_recorded, sample_crop, AugConfig, AugRecord, CropParams,
};
pub use cutmix::{apply_cutmix_box, perturb_cutmix, sample_cutmix_box, CutBox, CutMixConfig};
pub(crate) use augment::{blur_kernel_size, gaussian_blur};
pub use fourier::{fourier_swap_channel, fourier_window, perturb_fourier, FourierConfig};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap, SoftLabel, IGNORE};

/// A perturbed image with its label, validity mask and optional soft target.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbResult {
    pub image: ImageTensor,
    pub label: LabelMap,
    pub valid_mask: Vec<bool>,
    pub soft: Option<SoftLabel>,
}

impl PerturbResult {
    /// Wraps a pair as an unperturbed result; IGNORE pixels start invalid.
    pub fn new(image: ImageTensor, label: LabelMap) -> Result<Self> {
        let valid_mask = label.data().iter().map(|&v| v != IGNORE).collect();
        Self::with_mask(image, label, valid_mask, None)
    }

    pub fn with_mask(
        image: ImageTensor,
        label: LabelMap,
        valid_mask: Vec<bool>,
        soft: Option<SoftLabel>,
    ) -> Result<Self> {
        let (h, w) = image.dims();
        if label.dims() != (h, w) || valid_mask.len() != h * w {
            return Err(Error::Shape(format!(
                "image {h}x{w}, label {:?}, mask of {}",
                label.dims(),
                valid_mask.len()
            )));
        }
        if let Some(s) = &soft {
            if (s.height, s.width) != (h, w) {
                return Err(Error::Shape("soft target extent differs from image".into()));
            }
        }
        let mut r = PerturbResult {
            image,
            label,
            valid_mask,
            soft,
        };
        r.sync_mask();
        Ok(r)
    }

    fn sync_mask(&mut self) {
        for (m, &v) in self.valid_mask.iter_mut().zip(self.label.data()) {
            if v == IGNORE {
                *m = false;
            }
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

/// The labeled source sample consumed by mixing perturbations.
#[derive(Debug, Clone, Copy)]
pub struct SourceSample<'a> {
    pub image: &'a ImageTensor,
    pub label: &'a LabelMap,
}

/// Hook for perturbations implemented outside this crate, such as a neural
/// style-transfer model.
pub trait ExternalPerturbation: Send + Sync {
    fn name(&self) -> &str;
    fn apply(
        &self,
        input: PerturbResult,
        source: Option<SourceSample<'_>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<PerturbResult>;
}

#[derive(Clone)]
pub enum Perturbation {
    Identity,
    Augment(AugConfig),
    CutMix(CutMixConfig),
    Fourier(FourierConfig),
    /// Source-style transfer; needs an [`ExternalPerturbation`] to run.
    Style,
    External(Arc<dyn ExternalPerturbation>),
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Identity => f.write_str("Identity"),
            Perturbation::Augment(c) => f.debug_tuple("Augment").field(c).finish(),
            Perturbation::CutMix(c) => f.debug_tuple("CutMix").field(c).finish(),
            Perturbation::Fourier(c) => f.debug_tuple("Fourier").field(c).finish(),
            Perturbation::Style => f.write_str("Style"),
            Perturbation::External(p) => write!(f, "External({})", p.name()),
        }
    }
}

/// Perturbation names accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Identity,
    Augment,
    Cutmix,
    Fourier,
    Style,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Identity => "identity",
            PerturbKind::Augment => "augment",
            PerturbKind::Cutmix => "cutmix",
            PerturbKind::Fourier => "fourier",
            PerturbKind::Style => "style",
        }
    }
}

impl Perturbation {
    pub fn name(&self) -> &str {
        match self {
            Perturbation::Identity => "identity",
            Perturbation::Augment(_) => "augment",
            Perturbation::CutMix(_) => "cutmix",
            Perturbation::Fourier(_) => "fourier",
            Perturbation::Style => "style",
            Perturbation::External(p) => p.name(),
        }
    }

    pub fn needs_source(&self) -> bool {
        matches!(self, Perturbation::CutMix(_) | Perturbation::Fourier(_))
    }

    pub fn apply(
        &self,
        input: PerturbResult,
        source: Option<SourceSample<'_>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<PerturbResult> {
        let need_source = || {
            source.ok_or_else(|| Error::Config(format!("{} perturbation needs a source sample", self.name())))
        };
        match self {
            Perturbation::Identity => Ok(input),
            Perturbation::Augment(cfg) => augment::augment_result(input, cfg, rng).map(|(r, _)| r),
            Perturbation::CutMix(cfg) => {
                let src = need_source()?;
                let bx = sample_cutmix_box(input.dims(), cfg, rng)?;
                apply_cutmix_box(input, src, bx)
            }
            Perturbation::Fourier(cfg) => {
                let src = need_source()?;
                fourier::fourier_result(input, src.image, cfg)
            }
            Perturbation::Style => Err(Error::Unsupported(
                "style consistency needs an external style-transfer model; register one with Perturbation::External"
                    .into(),
            )),
            Perturbation::External(p) => p.apply(input, source, rng),
        }
    }
}

/// Applies `fns` left to right. Every source-consuming step reads the same
/// `source` sample.
pub fn compose_perturbations(
    fns: &[Perturbation],
    input: PerturbResult,
    source: Option<SourceSample<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<PerturbResult> {
    if fns.is_empty() {
        return Err(Error::Config("empty perturbation chain".into()));
    }
    fns.iter().try_fold(input, |acc, f| f.apply(acc, source, rng))
}
