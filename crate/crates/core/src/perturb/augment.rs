//! Heavy data augmentation: random resized crop, brightness/contrast and
//! hue/saturation/value jitter, grayscale, Gaussian blur.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PerturbResult;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap, SoftLabel};

const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio range, sampled log-uniformly and measured relative
    /// to the input's own width / height, so `(1, 1)` keeps the input shape.
    pub crop_ratio: (f64, f64),
    /// Square output extent; `None` keeps the input extents.
    pub output_size: Option<usize>,
    pub color_jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Hue shift as a fraction of the hue circle.
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub gray_prob: f64,
    pub blur_prob: f64,
    pub blur_limit: usize,
    pub blur_sigma: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            output_size: None,
            color_jitter_prob: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            hue: 0.1,
            saturation: 0.3,
            value: 0.3,
            gray_prob: 0.2,
            blur_prob: 0.5,
            blur_limit: 5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugConfig {
    /// Full-image crop with every photometric step disabled.
    pub fn identity() -> Self {
        AugConfig {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            color_jitter_prob: 0.0,
            gray_prob: 0.0,
            blur_prob: 0.0,
            ..AugConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = prob(self.color_jitter_prob)
            && prob(self.gray_prob)
            && prob(self.blur_prob)
            && self.crop_scale.0 > 0.0
            && self.crop_scale.0 <= self.crop_scale.1
            && self.crop_scale.1 <= 1.0
            && self.crop_ratio.0 > 0.0
            && self.crop_ratio.0 <= self.crop_ratio.1
            && self.blur_sigma.0 > 0.0
            && self.blur_sigma.0 <= self.blur_sigma.1
            && self.blur_limit >= 3
            && self.output_size != Some(0)
            && [self.brightness, self.contrast, self.hue, self.saturation, self.value]
                .iter()
                .all(|&r| r >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// Crop window in input pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// The random choices made by one augmentation call.
#[derive(Debug, Clone, PartialEq)]
pub struct AugRecord {
    pub crop: CropParams,
    pub out_size: (usize, usize),
    /// `(brightness shift, contrast factor, hue, saturation, value shifts)`.
    pub jitter: Option<[f64; 5]>,
    pub gray: bool,
    pub blur_sigma: Option<f64>,
}

/// Draws a crop window. Extents are clipped to the image; a window that
/// rounds to zero pixels is redrawn, up to ten times.
pub fn sample_crop(h: usize, w: usize, cfg: &AugConfig, rng: &mut ChaCha8Rng) -> Result<CropParams> {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.gen_range(lr0..=lr1).exp() * w as f64 / h as f64;
        let cw = ((target * ratio).sqrt().round() as usize).min(w);
        let ch = ((target / ratio).sqrt().round() as usize).min(h);
        if cw >= 1 && ch >= 1 {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return Ok(CropParams {
                top,
                left,
                height: ch,
                width: cw,
            });
        }
    }
    Err(Error::Domain(format!(
        "no non-degenerate crop of a {h}x{w} image after {CROP_ATTEMPTS} attempts"
    )))
}

/// Nearest source index along one axis for each output index.
fn nearest_taps(start: usize, extent: usize, out: usize) -> Vec<usize> {
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * extent as f64 / out as f64).floor() as usize;
            start + s.min(extent - 1)
        })
        .collect()
}

/// Bilinear taps `(lo, hi, frac)` along one axis, confined to the window.
fn bilinear_taps(start: usize, extent: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * extent as f64 / out as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (start + i0, start + i1, s - i0 as f64)
        })
        .collect()
}

/// Resamples image (bilinear), label, mask and soft target (nearest) over
/// `crop` to an `out_h × out_w` grid.
pub fn apply_crop(input: &PerturbResult, crop: CropParams, out_h: usize, out_w: usize) -> Result<PerturbResult> {
    let (h, w) = input.dims();
    if crop.height == 0 || crop.width == 0 || crop.top + crop.height > h || crop.left + crop.width > w {
        return Err(Error::Shape(format!("crop {crop:?} outside a {h}x{w} image")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("empty crop output".into()));
    }
    let rows = bilinear_taps(crop.top, crop.height, out_h);
    let cols = bilinear_taps(crop.left, crop.width, out_w);
    let mut image = vec![0.0; 3 * out_h * out_w];
    for c in 0..3 {
        let src = input.image.channel(c);
        let dst = &mut image[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (ox, &(c0, c1, fx)) in cols.iter().enumerate() {
                let top = (1.0 - fx) * src[r0 * w + c0] + fx * src[r0 * w + c1];
                let bottom = (1.0 - fx) * src[r1 * w + c0] + fx * src[r1 * w + c1];
                dst[oy * out_w + ox] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }

    let nr = nearest_taps(crop.top, crop.height, out_h);
    let nc = nearest_taps(crop.left, crop.width, out_w);
    let gather = |p: usize| nr[p / out_w] * w + nc[p % out_w];
    let plane = out_h * out_w;
    let label: Vec<u8> = (0..plane).map(|p| input.label.data()[gather(p)]).collect();
    let mask: Vec<bool> = (0..plane).map(|p| input.valid_mask[gather(p)]).collect();
    let soft = input.soft.as_ref().map(|s| {
        let mut data = Vec::with_capacity(s.classes * plane);
        for c in 0..s.classes {
            let src = &s.data[c * h * w..(c + 1) * h * w];
            data.extend((0..plane).map(|p| src[gather(p)]));
        }
        SoftLabel {
            classes: s.classes,
            height: out_h,
            width: out_w,
            data,
        }
    });
    PerturbResult::with_mask(
        ImageTensor::new(out_h, out_w, image)?,
        LabelMap::new(out_h, out_w, label)?,
        mask,
        soft,
    )
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn jitter(img: &mut ImageTensor, [bright, contrast, dh, ds, dv]: [f64; 5]) {
    for v in img.data_mut() {
        *v = (*v * contrast + bright).clamp(0.0, 1.0);
    }
    let (h, w) = img.dims();
    for y in 0..h {
        for x in 0..w {
            let [hh, s, v] = rgb_to_hsv(img.pixel(y, x));
            let hsv = [
                (hh + dh).rem_euclid(1.0),
                (s + ds).clamp(0.0, 1.0),
                (v + dv).clamp(0.0, 1.0),
            ];
            img.set_pixel(y, x, hsv_to_rgb(hsv));
        }
    }
}

fn grayscale(img: &mut ImageTensor) {
    let (h, w) = img.dims();
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = img.pixel(y, x);
            let l = 0.299 * r + 0.587 * g + 0.114 * b;
            img.set_pixel(y, x, [l, l, l]);
        }
    }
}

/// Smallest odd size ≥ 4σ+1, capped at `limit` (rounded down to odd), at least 3.
pub(crate) fn blur_kernel_size(sigma: f64, limit: usize) -> usize {
    let mut k = (4.0 * sigma + 1.0).ceil() as usize;
    if k.is_multiple_of(2) {
        k += 1;
    }
    let cap = if limit.is_multiple_of(2) { limit - 1 } else { limit };
    k.min(cap).max(3)
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub(crate) fn gaussian_blur(img: &mut ImageTensor, sigma: f64, ksize: usize) {
    let r = (ksize / 2) as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = img.dims();
    let mut tmp = vec![0.0; h * w];
    for c in 0..3 {
        let plane = img.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + reflect101(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[reflect101(y as isize + k as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
}

pub(crate) fn augment_result(
    input: PerturbResult,
    cfg: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PerturbResult, AugRecord)> {
    cfg.validate()?;
    let (h, w) = input.dims();
    let crop = sample_crop(h, w, cfg, rng)?;
    let out_size = cfg.output_size.map_or((h, w), |s| (s, s));
    let mut out = apply_crop(&input, crop, out_size.0, out_size.1)?;

    let mut record = AugRecord {
        crop,
        out_size,
        jitter: None,
        gray: false,
        blur_sigma: None,
    };
    if rng.gen::<f64>() < cfg.color_jitter_prob {
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let params = [
            sym(cfg.brightness),
            1.0 + sym(cfg.contrast),
            sym(cfg.hue),
            sym(cfg.saturation),
            sym(cfg.value),
        ];
        jitter(&mut out.image, params);
        record.jitter = Some(params);
    }
    if rng.gen::<f64>() < cfg.gray_prob {
        grayscale(&mut out.image);
        record.gray = true;
    }
    if rng.gen::<f64>() < cfg.blur_prob {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut out.image, sigma, blur_kernel_size(sigma, cfg.blur_limit));
        record.blur_sigma = Some(sigma);
    }
    out.image.clamp_unit();
    Ok((out, record))
}

/// Augments an (image, label) pair; geometry is shared, photometry is image-only.
pub fn perturb_augment(x: &ImageTensor, y: &LabelMap, cfg: &AugConfig, rng: &mut ChaCha8Rng) -> Result<PerturbResult> {
    perturb_augment_recorded(x, y, cfg, rng).map(|(r, _)| r)
}

/// [`perturb_augment`] that also reports the random choices it made.
pub fn perturb_augment_recorded(
    x: &ImageTensor,
    y: &LabelMap,
    cfg: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PerturbResult, AugRecord)> {
    augment_result(PerturbResult::new(x.clone(), y.clone())?, cfg, rng)
}
