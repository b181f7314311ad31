//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use pixmatch::image::{LabelMap, IGNORE};
use pixmatch::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

/// Textbook O(N²) 2-D DFT, `X[u,v] = Σ x[y,x]·exp(−2πi(uy/H + vx/W))`.
pub fn naive_dft2(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = sign * 2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += data[y * w + x] * Complex64::from_polar(1.0, phase);
                }
            }
            out[u * w + v] = if inverse { acc / (h * w) as f64 } else { acc };
        }
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi]` kept at least `gap` away from `kink`.
pub fn random_away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compares reverse-mode gradients of `f` with five-point central
/// differences, `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`.
///
/// A non-scalar output is reduced to `Σ r ⊙ f(x)` with fixed random `r`.
/// Returns the largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_error<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let reducer = random_tensor(rng, &probe_shape, -1.0, 1.0);
    let eval = |values: &[Tensor], grad: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grad);
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        let r = tape.constant(reducer.clone());
        let prod = tape.mul(out, r).unwrap();
        let loss = tape.sum(prod);
        let value = tape.data(loss)[0];
        if !grad {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let h = 1e-4;
    let floor = 1e-7;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let a = analytic[i].clone().unwrap_or_else(|| vec![0.0; input.numel()]);
        for k in 0..input.numel() {
            let at = |step: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[k] += step;
                eval(&moved, false).0
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let err = (a[k] - numeric).abs() / a[k].abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// IoU per class by explicit pixel-set intersection and union.
pub fn brute_force_iou(pairs: &[(LabelMap, LabelMap)], classes: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes as u8 {
        let mut inter = std::collections::BTreeSet::new();
        let mut union = std::collections::BTreeSet::new();
        for (img, (pred, truth)) in pairs.iter().enumerate() {
            for (p, (&a, &b)) in pred.data().iter().zip(truth.data()).enumerate() {
                if b == IGNORE {
                    continue;
                }
                if a == c && b == c {
                    inter.insert((img, p));
                }
                if a == c || b == c {
                    union.insert((img, p));
                }
            }
        }
        per_class.push((!union.is_empty()).then(|| inter.len() as f64 / union.len() as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per_class, miou)
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8, ignore_rate: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| {
            if rng.gen_bool(ignore_rate) {
                IGNORE
            } else {
                rng.gen_range(0..classes)
            }
        })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}
