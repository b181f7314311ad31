//! Loss terms for consistency training.
//!
//! All losses take per-pixel class probabilities (`[N, C, H, W]`, the output
//! of [`Tape::softmax_channels`]) and reduce to a scalar by averaging over the
//! scored pixels of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMap, SoftLabel, IGNORE};
use crate::segnet::argmax_planes;
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped to this before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the target consistency term.
    pub lambda_t: f64,
    /// Pseudolabel confidence threshold; a pixel is kept when its top
    /// probability exceeds it. `0` keeps every pixel.
    pub tau: f64,
    pub lambda_msl: f64,
    pub lambda_ent: f64,
    /// Use the full detached distribution as the consistency target.
    pub soft: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_t: 0.10,
            tau: 0.0,
            lambda_msl: 0.0,
            lambda_ent: 0.0,
            soft: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_t >= 0.0
            && self.lambda_msl >= 0.0
            && self.lambda_ent >= 0.0
            && (0.0..1.0).contains(&self.tau);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// A pixel-averaged loss and how many pixels it averaged over.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub value: Var,
    pub scored_pixels: usize,
}

impl MaskedLoss {
    /// True when nothing was scored and the loss fell back to 0.
    pub fn is_empty(&self) -> bool {
        self.scored_pixels == 0
    }
}

fn dims(tape: &Tape, probs: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(probs) {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape(format!("probability map must be [N,C,H,W], got {s:?}"))),
    }
}

fn check_labels(labels: &[LabelMap], n: usize, h: usize, w: usize) -> Result<()> {
    if labels.len() != n || labels.iter().any(|l| l.dims() != (h, w)) {
        return Err(Error::Shape(format!(
            "{} label maps for a batch of {n} {h}x{w} predictions",
            labels.len()
        )));
    }
    Ok(())
}

/// Mean of `−log p[label]` over pixels where `weight` is 1.
fn hard_cross_entropy(tape: &mut Tape, probs: Var, index: &[usize], weight: &[f64]) -> Result<Var> {
    let picked = tape.gather_channels(probs, index)?;
    let safe = tape.clamp_min(picked, LOG_FLOOR);
    let logp = tape.log(safe)?;
    let mean = tape.masked_mean(logp, weight)?;
    Ok(tape.scale(mean, -1.0))
}

/// Supervised cross-entropy averaged over non-[`IGNORE`] pixels.
pub fn source_ce(tape: &mut Tape, probs: Var, labels: &[LabelMap]) -> Result<MaskedLoss> {
    let (n, c, h, w) = dims(tape, probs)?;
    check_labels(labels, n, h, w)?;
    let mut index = Vec::with_capacity(n * h * w);
    let mut weight = Vec::with_capacity(n * h * w);
    for &v in labels.iter().flat_map(|l| l.data()) {
        if v == IGNORE {
            index.push(0);
            weight.push(0.0);
        } else if (v as usize) < c {
            index.push(v as usize);
            weight.push(1.0);
        } else {
            return Err(Error::Label(format!("label {v} with {c} classes")));
        }
    }
    let scored_pixels = weight.iter().filter(|&&w| w > 0.0).count();
    let value = hard_cross_entropy(tape, probs, &index, &weight)?;
    Ok(MaskedLoss {
        value,
        scored_pixels,
    })
}

/// A detached pseudolabel for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pseudolabel {
    /// Argmax class per pixel, [`IGNORE`] where the pixel is below threshold.
    pub label: LabelMap,
    pub valid: Vec<bool>,
    /// The detached distribution the label was taken from.
    pub probs: SoftLabel,
}

/// Argmax pseudolabels from `probs`, read through a detached copy so no
/// gradient can reach the producing pass. Pixels whose top probability does
/// not exceed `tau` are marked invalid.
pub fn make_pseudolabel(tape: &mut Tape, probs: Var, tau: f64) -> Result<Vec<Pseudolabel>> {
    let (n, c, h, w) = dims(tape, probs)?;
    let detached = tape.detach(probs);
    let data = tape.data(detached);
    let plane = c * h * w;
    Ok((0..n)
        .map(|b| pseudolabel_from_planes(&data[b * plane..(b + 1) * plane], c, h, w, tau))
        .collect())
}

/// Same as [`make_pseudolabel`] for one `[C][H][W]` distribution buffer.
pub fn pseudolabel_from_planes(probs: &[f64], c: usize, h: usize, w: usize, tau: f64) -> Pseudolabel {
    let mut label = argmax_planes(probs, c, h, w);
    let plane = h * w;
    let valid: Vec<bool> = label
        .data()
        .iter()
        .enumerate()
        .map(|(p, &k)| probs[k as usize * plane + p] > tau)
        .collect();
    for (v, &ok) in label.data_mut().iter_mut().zip(&valid) {
        if !ok {
            *v = IGNORE;
        }
    }
    Pseudolabel {
        label,
        valid,
        probs: SoftLabel {
            classes: c,
            height: h,
            width: w,
            data: probs.to_vec(),
        },
    }
}

/// Consistency between predictions on perturbed images and the perturbed
/// pseudolabels. Hard mode averages `−log p[ŷ]`; soft mode averages the full
/// cross-entropy `−Σ_c q_c log p_c` against `soft_target`. Only pixels with
/// `valid` set (and, in hard mode, a non-[`IGNORE`] label) are scored.
pub fn consistency_loss(
    tape: &mut Tape,
    probs_pert: Var,
    pseudo_pert: &[LabelMap],
    valid: &[Vec<bool>],
    soft_target: Option<&[SoftLabel]>,
    weights: &LossWeights,
) -> Result<MaskedLoss> {
    let (n, c, h, w) = dims(tape, probs_pert)?;
    check_labels(pseudo_pert, n, h, w)?;
    if valid.len() != n || valid.iter().any(|m| m.len() != h * w) {
        return Err(Error::Shape("validity mask does not match predictions".into()));
    }
    if !weights.soft {
        let mut index = Vec::with_capacity(n * h * w);
        let mut weight = Vec::with_capacity(n * h * w);
        for (label, mask) in pseudo_pert.iter().zip(valid) {
            for (&v, &ok) in label.data().iter().zip(mask) {
                if ok && (v as usize) < c {
                    index.push(v as usize);
                    weight.push(1.0);
                } else if ok && v != IGNORE {
                    return Err(Error::Label(format!("pseudolabel {v} with {c} classes")));
                } else {
                    index.push(0);
                    weight.push(0.0);
                }
            }
        }
        let scored_pixels = weight.iter().filter(|&&w| w > 0.0).count();
        let value = hard_cross_entropy(tape, probs_pert, &index, &weight)?;
        return Ok(MaskedLoss {
            value,
            scored_pixels,
        });
    }

    let targets = soft_target.ok_or_else(|| Error::Config("soft consistency needs a soft target".into()))?;
    if targets.len() != n
        || targets
            .iter()
            .any(|t| (t.classes, t.height, t.width) != (c, h, w))
    {
        return Err(Error::Shape("soft target does not match predictions".into()));
    }
    let mut q = Vec::with_capacity(n * c * h * w);
    for t in targets {
        q.extend_from_slice(&t.data);
    }
    let weight: Vec<f64> = valid.iter().flatten().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
    let scored_pixels = weight.iter().filter(|&&w| w > 0.0).count();
    let q = tape.constant(Tensor::new([n, c, h, w], q)?);
    let safe = tape.clamp_min(probs_pert, LOG_FLOOR);
    let logp = tape.log(safe)?;
    let prod = tape.mul(q, logp)?;
    let per_pixel = tape.sum_channels(prod)?;
    let mean = tape.masked_mean(per_pixel, &weight)?;
    Ok(MaskedLoss {
        value: tape.scale(mean, -1.0),
        scored_pixels,
    })
}

/// Mean over pixels of `−½ Σ_c p_c²`.
pub fn max_square_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    dims(tape, probs)?;
    let sq = tape.square(probs);
    let per_pixel = tape.sum_channels(sq)?;
    let mean = tape.mean(per_pixel);
    Ok(tape.scale(mean, -0.5))
}

/// Mean over pixels of `−Σ_c p_c log p_c`, with `0·log 0 = 0`.
pub fn entropy_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    dims(tape, probs)?;
    let safe = tape.clamp_min(probs, LOG_FLOOR);
    let logp = tape.log(safe)?;
    let plogp = tape.mul(probs, logp)?;
    let per_pixel = tape.sum_channels(plogp)?;
    let mean = tape.mean(per_pixel);
    Ok(tape.scale(mean, -1.0))
}

/// `L_S + λ_T·L_T + λ_MSL·L_MSL + λ_ENT·L_ENT`.
pub fn total_loss(
    tape: &mut Tape,
    source: Var,
    consistency: Var,
    max_square: Var,
    entropy: Var,
    w: &LossWeights,
) -> Result<Var> {
    for v in [source, consistency, max_square, entropy] {
        if tape.value(v).numel() != 1 {
            return Err(Error::Shape(format!("loss term of shape {:?}", tape.shape(v))));
        }
    }
    let mut total = source;
    for (term, weight) in [
        (consistency, w.lambda_t),
        (max_square, w.lambda_msl),
        (entropy, w.lambda_ent),
    ] {
        let scaled = tape.scale(term, weight);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(tape: &mut Tape, c: usize, h: usize, w: usize, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new([1, c, h, w], data).unwrap())
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn source_ce_closed_forms() {
        let mut tape = Tape::new();
        let one_hot = probs(&mut tape, 2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let labels = [LabelMap::new(1, 2, vec![0, 1]).unwrap()];
        let l = source_ce(&mut tape, one_hot, &labels).unwrap();
        assert_eq!(scalar(&tape, l.value), 0.0);

        let uniform = probs(&mut tape, 4, 1, 3, vec![0.25; 12]);
        let labels = [LabelMap::new(1, 3, vec![0, 3, IGNORE]).unwrap()];
        let l = source_ce(&mut tape, uniform, &labels).unwrap();
        assert!((scalar(&tape, l.value) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(l.scored_pixels, 2);

        let p = probs(&mut tape, 2, 1, 2, vec![0.5, 0.75, 0.5, 0.25]);
        let labels = [LabelMap::new(1, 2, vec![0, 1]).unwrap()];
        let l = source_ce(&mut tape, p, &labels).unwrap();
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((scalar(&tape, l.value) - expected).abs() < 1e-12);
    }

    #[test]
    fn source_ce_all_ignore_is_zero_and_flagged() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, 2, 1, 2, vec![0.5; 4]);
        let labels = [LabelMap::filled(1, 2, IGNORE)];
        let l = source_ce(&mut tape, p, &labels).unwrap();
        assert_eq!(scalar(&tape, l.value), 0.0);
        assert!(l.is_empty());
        let bad = [LabelMap::filled(1, 2, 7)];
        assert!(source_ce(&mut tape, p, &bad).is_err());
    }

    #[test]
    fn pseudolabel_threshold_and_ties() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, 2, 1, 3, vec![0.6, 0.5, 0.1, 0.4, 0.5, 0.9]);
        let all = make_pseudolabel(&mut tape, p, 0.0).unwrap();
        assert_eq!(all[0].label.data(), &[0, 0, 1]);
        assert!(all[0].valid.iter().all(|&v| v));
        let strict = make_pseudolabel(&mut tape, p, 0.7).unwrap();
        assert_eq!(strict[0].valid, vec![false, false, true]);
        assert_eq!(strict[0].label.data(), &[IGNORE, IGNORE, 1]);
    }

    #[test]
    fn consistency_single_pixel_and_empty_mask() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, 2, 1, 1, vec![0.2, 0.8]);
        let label = [LabelMap::new(1, 1, vec![1]).unwrap()];
        let w = LossWeights::default();
        let l = consistency_loss(&mut tape, p, &label, &[vec![true]], None, &w).unwrap();
        assert!((scalar(&tape, l.value) + 0.8f64.ln()).abs() < 1e-15);
        let l = consistency_loss(&mut tape, p, &label, &[vec![false]], None, &w).unwrap();
        assert_eq!(scalar(&tape, l.value), 0.0);
        assert!(l.is_empty());
        assert!(consistency_loss(&mut tape, p, &label, &[vec![true, true]], None, &w).is_err());
    }

    #[test]
    fn soft_consistency_against_one_hot_matches_hard() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, 3, 1, 2, vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]);
        let label = LabelMap::new(1, 2, vec![1, 2]).unwrap();
        let mask = vec![vec![true, true]];
        let hard = consistency_loss(&mut tape, p, std::slice::from_ref(&label), &mask, None, &LossWeights::default()).unwrap();
        let soft_w = LossWeights {
            soft: true,
            ..LossWeights::default()
        };
        let target = [SoftLabel::one_hot(&label, 3)];
        let soft = consistency_loss(&mut tape, p, &[label], &mask, Some(&target), &soft_w).unwrap();
        assert!((scalar(&tape, hard.value) - scalar(&tape, soft.value)).abs() < 1e-15);
    }

    #[test]
    fn max_square_closed_forms() {
        let mut tape = Tape::new();
        let one_hot = probs(&mut tape, 3, 1, 1, vec![0.0, 1.0, 0.0]);
        let v = max_square_loss(&mut tape, one_hot).unwrap();
        assert_eq!(scalar(&tape, v), -0.5);
        let u2 = probs(&mut tape, 2, 1, 1, vec![0.5, 0.5]);
        let v = max_square_loss(&mut tape, u2).unwrap();
        assert_eq!(scalar(&tape, v), -0.25);
        let u19 = probs(&mut tape, 19, 1, 1, vec![1.0 / 19.0; 19]);
        let v = max_square_loss(&mut tape, u19).unwrap();
        assert!((scalar(&tape, v) + 1.0 / 38.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_closed_forms() {
        let mut tape = Tape::new();
        let one_hot = probs(&mut tape, 3, 1, 1, vec![0.0, 1.0, 0.0]);
        let v = entropy_loss(&mut tape, one_hot).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);
        let u4 = probs(&mut tape, 4, 1, 1, vec![0.25; 4]);
        let v = entropy_loss(&mut tape, u4).unwrap();
        assert!((scalar(&tape, v) - 4f64.ln()).abs() < 1e-15);
        let half = probs(&mut tape, 2, 1, 1, vec![0.5, 0.5]);
        let v = entropy_loss(&mut tape, half).unwrap();
        assert!((scalar(&tape, v) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::new();
        let ls = tape.leaf(Tensor::scalar(1.5));
        let lt = tape.leaf(Tensor::scalar(2.0));
        let lm = tape.leaf(Tensor::scalar(-0.3));
        let le = tape.leaf(Tensor::scalar(0.7));
        let source_only = LossWeights {
            lambda_t: 0.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mut tape, ls, lt, lm, le, &source_only).unwrap();
        assert_eq!(scalar(&tape, t), 1.5);
        let t = total_loss(&mut tape, ls, lt, lm, le, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&tape, t), 1.5 + 0.1 * 2.0);
        let zero = tape.leaf(Tensor::scalar(0.0));
        let t = total_loss(&mut tape, zero, lt, lm, le, &source_only).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);
        let all = LossWeights {
            lambda_t: 0.1,
            lambda_msl: 0.05,
            lambda_ent: 0.2,
            ..LossWeights::default()
        };
        let t = total_loss(&mut tape, ls, lt, lm, le, &all).unwrap();
        assert!((scalar(&tape, t) - (1.5 + 0.2 - 0.015 + 0.14)).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            tau: 1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            lambda_t: -0.1,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
