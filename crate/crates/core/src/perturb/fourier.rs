//! Low-frequency amplitude swap: the target keeps its phase everywhere but
//! takes the source amplitude inside a small window around the DC bin.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::fft::{fft2_real, ifft2};
use super::PerturbResult;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourierConfig {
    /// Window half-extent as a fraction of each image extent.
    pub beta: f64,
    /// Also take the source phase inside the window.
    pub swap_phase: bool,
}

impl Default for FourierConfig {
    fn default() -> Self {
        FourierConfig {
            beta: 0.01,
            swap_phase: false,
        }
    }
}

impl FourierConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..0.5).contains(&self.beta) {
            Ok(())
        } else {
            Err(Error::Config(format!("beta {} outside [0, 0.5)", self.beta)))
        }
    }
}

/// Half-extents `(⌊βH⌋, ⌊βW⌋)` of the centered low-frequency window, which
/// spans `(2·⌊βH⌋+1) × (2·⌊βW⌋+1)` bins.
pub fn fourier_window(h: usize, w: usize, beta: f64) -> (usize, usize) {
    ((beta * h as f64).floor() as usize, (beta * w as f64).floor() as usize)
}

/// Bins `k` whose signed frequency offset from DC is at most `half`.
fn window_bins(n: usize, half: usize) -> Vec<usize> {
    let mut bins: Vec<usize> = (0..=half).collect();
    bins.extend((1..=half).map(|d| n - d));
    bins
}

/// Swaps one channel's low-frequency amplitude. The result is not clamped.
pub fn fourier_swap_channel(target: &[f64], source: &[f64], h: usize, w: usize, beta: f64, swap_phase: bool) -> Vec<f64> {
    let mut spec_t = fft2_real(target, h, w);
    let spec_s = fft2_real(source, h, w);
    let (bh, bw) = fourier_window(h, w, beta);
    let cols = window_bins(w, bw);
    for ky in window_bins(h, bh) {
        for &kx in &cols {
            let i = ky * w + kx;
            let phase = if swap_phase { spec_s[i].arg() } else { spec_t[i].arg() };
            spec_t[i] = Complex64::from_polar(spec_s[i].norm(), phase);
        }
    }
    ifft2(&spec_t, h, w).into_iter().map(|v| v.re).collect()
}

pub(crate) fn fourier_result(mut input: PerturbResult, source: &ImageTensor, cfg: &FourierConfig) -> Result<PerturbResult> {
    cfg.validate()?;
    let (h, w) = input.dims();
    if source.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "source {:?} and target {h}x{w} extents differ",
            source.dims()
        )));
    }
    for c in 0..3 {
        let swapped = fourier_swap_channel(input.image.channel(c), source.channel(c), h, w, cfg.beta, cfg.swap_phase);
        input.image.channel_mut(c).copy_from_slice(&swapped);
    }
    input.image.clamp_unit();
    Ok(input)
}

/// Fourier-stylizes `x_t` with the low frequencies of `x_s`; the label passes through.
pub fn perturb_fourier(x_t: &ImageTensor, y_t: &LabelMap, x_s: &ImageTensor, cfg: &FourierConfig) -> Result<PerturbResult> {
    if x_t.dims() != y_t.dims() {
        return Err(Error::Shape("image and label extents differ".into()));
    }
    fourier_result(PerturbResult::new(x_t.clone(), y_t.clone())?, x_s, cfg)
}
