use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PerturbResult, SourceSample};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap, IGNORE};

/// Side fraction `r` of the pasted box is drawn uniformly from
/// `[ratio_min, ratio_max]`; the box covers `r²` of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutMixConfig {
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        CutMixConfig {
            ratio_min: 0.1,
            ratio_max: 0.5,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid CutMix ratios {self:?}")))
        }
    }
}

/// Half-open pixel rectangle `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Draws the box extent from the ratio range and its position uniformly
/// among placements that keep it inside the image.
pub fn sample_cutmix_box((h, w): (usize, usize), cfg: &CutMixConfig, rng: &mut ChaCha8Rng) -> Result<CutBox> {
    cfg.validate()?;
    let r = rng.gen_range(cfg.ratio_min..=cfg.ratio_max);
    let height = ((h as f64 * r).floor() as usize).min(h);
    let width = ((w as f64 * r).floor() as usize).min(w);
    let top = rng.gen_range(0..=h - height);
    let left = rng.gen_range(0..=w - width);
    Ok(CutBox {
        top,
        left,
        height,
        width,
    })
}

/// Pastes the source image and labels into `bx`. Inside the box the label,
/// mask and soft target come from the source labels.
pub fn apply_cutmix_box(mut target: PerturbResult, source: SourceSample<'_>, bx: CutBox) -> Result<PerturbResult> {
    let (h, w) = target.dims();
    if source.image.dims() != (h, w) || source.label.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "source {:?} and target {h}x{w} extents differ",
            source.image.dims()
        )));
    }
    if bx.top + bx.height > h || bx.left + bx.width > w {
        return Err(Error::Shape(format!("box {bx:?} outside a {h}x{w} image")));
    }
    let plane = h * w;
    for y in bx.top..bx.top + bx.height {
        for x in bx.left..bx.left + bx.width {
            let p = y * w + x;
            target.image.set_pixel(y, x, source.image.pixel(y, x));
            let v = source.label.data()[p];
            target.label.data_mut()[p] = v;
            target.valid_mask[p] = v != IGNORE;
            if let Some(soft) = &mut target.soft {
                for c in 0..soft.classes {
                    soft.data[c * plane + p] = if v as usize == c { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(target)
}

/// CutMix of a source sample into a target (image, pseudolabel) pair.
pub fn perturb_cutmix(
    x_t: &ImageTensor,
    y_t: &LabelMap,
    x_s: &ImageTensor,
    y_s: &LabelMap,
    cfg: &CutMixConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PerturbResult> {
    if x_t.dims() != y_t.dims() || x_s.dims() != x_t.dims() || y_s.dims() != x_t.dims() {
        return Err(Error::Shape("CutMix inputs must share spatial extents".into()));
    }
    let bx = sample_cutmix_box(x_t.dims(), cfg, rng)?;
    apply_cutmix_box(
        PerturbResult::new(x_t.clone(), y_t.clone())?,
        SourceSample {
            image: x_s,
            label: y_s,
        },
        bx,
    )
}
