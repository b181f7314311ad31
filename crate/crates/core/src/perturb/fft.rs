//! Two-dimensional DFT over row-major `H × W` buffers.

pub use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

fn transform(data: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    assert_eq!(data.len(), h * w, "buffer does not hold {h}x{w} values");
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(w, direction);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for (y, slot) in column.iter_mut().enumerate() {
            *slot = data[y * w + x];
        }
        col_fft.process(&mut column);
        for (y, v) in column.iter().enumerate() {
            data[y * w + x] = *v;
        }
    }
}

/// Unnormalized forward transform.
pub fn fft2(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = data.to_vec();
    transform(&mut out, h, w, FftDirection::Forward);
    out
}

pub fn fft2_real(data: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut out, h, w, FftDirection::Forward);
    out
}

/// Inverse transform, scaled by `1/(H·W)` so that `ifft2(fft2(x)) == x`.
pub fn ifft2(spectrum: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = spectrum.to_vec();
    transform(&mut out, h, w, FftDirection::Inverse);
    let scale = 1.0 / (h * w) as f64;
    for v in &mut out {
        *v *= scale;
    }
    out
}
