//! Small fully-convolutional segmentation network and its SGD optimizer.
//!
//! Each stage is a 3×3 convolution followed by ReLU; the first stage runs at
//! stride 1 and every later one at stride 2. A 1×1 head maps the last stage to
//! class logits, which are bilinearly upsampled back to the input resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub init_seed: u64,
    /// Start the classifier head at zero, so initial predictions are uniform.
    pub zero_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![16, 32, 64],
            init_seed: 0,
            zero_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    num_classes: usize,
    widths: Vec<usize>,
    params: Vec<(String, Tensor)>,
}

/// Parameter handles of a model recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], gain: f64) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = gain * (3.0 / fan_in).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl SegModel {
    pub fn new(num_classes: usize, cfg: &ModelConfig) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(Error::Config(format!("invalid stage widths {:?}", cfg.widths)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let weight = kaiming_uniform(&mut rng, [w, cin, 3, 3], 2f64.sqrt());
            params.push((format!("stage{i}.weight"), weight));
            params.push((format!("stage{i}.bias"), Tensor::zeros([w])));
            cin = w;
        }
        let head_shape = [num_classes, cin, 1, 1];
        let head = if cfg.zero_head {
            Tensor::zeros(head_shape)
        } else {
            kaiming_uniform(&mut rng, head_shape, 1.0)
        };
        params.push(("head.weight".into(), head));
        params.push(("head.bias".into(), Tensor::zeros([num_classes])));
        for (_, p) in &mut params {
            p.set_requires_grad(true);
        }
        Ok(SegModel {
            num_classes,
            widths: cfg.widths.clone(),
            params,
        })
    }

    /// Rebuilds a model from named tensors, inferring widths and class count
    /// from the parameter shapes.
    pub fn from_named(records: Vec<(String, Tensor)>) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let stages = (records.len() / 2).saturating_sub(1);
        if records.len() != 2 * (stages + 1) || stages == 0 {
            return Err(bad(format!("unexpected parameter count {}", records.len())));
        }
        let mut widths = Vec::with_capacity(stages);
        let mut cin = 3;
        for (i, pair) in records.chunks(2).enumerate() {
            let prefix = if i < stages { format!("stage{i}") } else { "head".to_string() };
            let (wn, w) = &pair[0];
            let (bn, b) = &pair[1];
            if *wn != format!("{prefix}.weight") || *bn != format!("{prefix}.bias") {
                return Err(bad(format!("unexpected parameter names {wn}, {bn}")));
            }
            let k = if i < stages { 3 } else { 1 };
            let &[cout, wc, kh, kw] = w.shape() else {
                return Err(bad(format!("{wn} has shape {:?}", w.shape())));
            };
            if wc != cin || kh != k || kw != k || b.shape() != [cout] {
                return Err(bad(format!("{wn}/{bn} shapes {:?}/{:?}", w.shape(), b.shape())));
            }
            if i < stages {
                widths.push(cout);
            }
            cin = cout;
        }
        let num_classes = records.last().map(|(_, b)| b.numel()).unwrap_or(0);
        if num_classes < 2 {
            return Err(bad(format!("{num_classes} output classes")));
        }
        let params = records
            .into_iter()
            .map(|(n, mut t)| {
                t.set_requires_grad(true);
                (n, t)
            })
            .collect();
        Ok(SegModel {
            num_classes,
            widths,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Input extents must be multiples of this.
    pub fn total_stride(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            p.zero_grad();
        }
    }

    /// Records the parameters on `tape`; `trainable` leaves receive gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(_, p)| {
                let mut t = Tensor::from_parts(p.shape().to_vec(), p.data().to_vec());
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the tape gradients of bound parameters into the model's own.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for ((_, p), &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Logits `[N, C, H, W]` for an `[N, 3, H, W]` input.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, input: Var) -> Result<Var> {
        let &[_, c, h, w] = tape.shape(input) else {
            return Err(Error::Shape(format!("model input must be [N,3,H,W], got {:?}", tape.shape(input))));
        };
        let stride = self.total_stride();
        if c != 3 || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {c}x{h}x{w}: need 3 channels and extents divisible by {stride}"
            )));
        }
        let p = &bound.vars;
        let mut x = input;
        for i in 0..self.widths.len() {
            let s = if i == 0 { 1 } else { 2 };
            let y = tape.conv2d(x, p[2 * i], p[2 * i + 1], s, 1)?;
            x = tape.relu(y);
        }
        let k = 2 * self.widths.len();
        let logits = tape.conv2d(x, p[k], p[k + 1], 1, 0)?;
        if stride == 1 {
            Ok(logits)
        } else {
            tape.resize_bilinear(logits, h, w)
        }
    }

    /// Per-pixel class probabilities `[C][H][W]` for one image, off any training tape.
    pub fn predict_probs(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image_batch(std::slice::from_ref(image))?);
        let logits = self.forward(&mut tape, &bound, x)?;
        let probs = tape.softmax_channels(logits)?;
        Ok(tape.data(probs).to_vec())
    }

    /// Argmax prediction; ties resolve to the lowest class index.
    pub fn predict(&self, image: &ImageTensor) -> Result<LabelMap> {
        let probs = self.predict_probs(image)?;
        let (h, w) = image.dims();
        Ok(argmax_planes(&probs, self.num_classes, h, w))
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn image_batch(images: &[ImageTensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::Shape(format!("batch mixes {h}x{w} and {:?} images", img.dims())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new([images.len(), 3, h, w], data)
}

pub(crate) fn argmax_planes(probs: &[f64], classes: usize, h: usize, w: usize) -> LabelMap {
    let plane = h * w;
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * plane + p] > probs[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data).expect("plane-sized label data")
}

/// SGD hyperparameters with polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1.0e-4,
            momentum: 0.9,
            weight_decay: 5.0e-4,
            power: 0.9,
            max_iter: 5000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.power > 0.0
            && self.max_iter >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(cfg: &OptimConfig, iter: usize) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::Config(format!(
            "iteration {iter} beyond max_iter {}",
            cfg.max_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.base_lr * frac.powf(cfg.power))
}

/// SGD with momentum and L2 weight decay folded into the velocity.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: OptimConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig, model: &SegModel) -> Result<Self> {
        cfg.validate()?;
        let velocity = model.params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Ok(Sgd { cfg, velocity })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// `v ← μ·v + g + λ·θ; θ ← θ − lr(iter)·v`, then clears the gradients.
    pub fn step(&mut self, model: &mut SegModel, iter: usize) -> Result<()> {
        if let Some((name, _)) = model.params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::Config(format!("parameter {name} has no gradient")));
        }
        let lr = poly_lr(&self.cfg, iter)?;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((_, p), v) in model.params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad().expect("checked above").to_vec();
            for ((theta, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vel = mu * *vel + g + wd * *theta;
                *theta -= lr * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(value: f64) -> SegModel {
        let mut t = Tensor::scalar(value);
        t.set_requires_grad(true);
        SegModel {
            num_classes: 2,
            widths: vec![1],
            params: vec![("p".into(), t)],
        }
    }

    fn cfg(lr: f64, momentum: f64, wd: f64) -> OptimConfig {
        OptimConfig {
            base_lr: lr,
            momentum,
            weight_decay: wd,
            power: 0.9,
            max_iter: 1_000_000_000,
        }
    }

    fn set_grad(m: &mut SegModel, g: f64) {
        m.params[0].1.accumulate_grad(&[g]).unwrap();
    }

    #[test]
    fn plain_sgd_step() {
        let mut m = scalar_model(5.0);
        let mut opt = Sgd::new(cfg(0.1, 0.0, 0.0), &m).unwrap();
        set_grad(&mut m, 1.0);
        opt.step(&mut m, 0).unwrap();
        assert!((m.params[0].1.data()[0] - 4.9).abs() < 1e-15);
        assert!(m.params[0].1.grad().is_none());
    }

    #[test]
    fn momentum_unrolls() {
        let mut m = scalar_model(0.0);
        let mut opt = Sgd::new(cfg(1.0, 0.9, 0.0), &m).unwrap();
        set_grad(&mut m, 1.0);
        opt.step(&mut m, 0).unwrap();
        let after1 = m.params[0].1.data()[0];
        set_grad(&mut m, 1.0);
        opt.step(&mut m, 0).unwrap();
        let after2 = m.params[0].1.data()[0];
        assert!((after1 - -1.0).abs() < 1e-15);
        assert!((after1 - after2 - 1.9).abs() < 1e-15);
    }

    #[test]
    fn pure_weight_decay() {
        let mut m = scalar_model(2.0);
        let mut opt = Sgd::new(cfg(1.0, 0.0, 0.5), &m).unwrap();
        set_grad(&mut m, 0.0);
        opt.step(&mut m, 0).unwrap();
        assert_eq!(m.params[0].1.data()[0], 1.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut m = scalar_model(2.0);
        let mut opt = Sgd::new(cfg(1.0, 0.0, 0.5), &m).unwrap();
        assert!(opt.step(&mut m, 0).is_err());
    }

    #[test]
    fn poly_lr_values() {
        let c = OptimConfig {
            max_iter: 100,
            ..OptimConfig::default()
        };
        assert_eq!(poly_lr(&c, 0).unwrap(), 1e-4);
        assert_eq!(poly_lr(&c, 100).unwrap(), 0.0);
        let mid = poly_lr(&c, 50).unwrap();
        assert!((mid - 1e-4 * 0.535_886_731_268_146_6).abs() < 1e-18);
        assert!(poly_lr(&c, 101).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = poly_lr(&c, i).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn optimizer_config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(cfg(0.0, 0.0, 0.0).validate().is_err());
        assert!(cfg(1.0, 1.0, 0.0).validate().is_err());
        let zero_iter = OptimConfig {
            max_iter: 0,
            ..OptimConfig::default()
        };
        assert!(zero_iter.validate().is_err());
    }

    #[test]
    fn forward_shape_and_zero_head() {
        let model = SegModel::new(
            5,
            &ModelConfig {
                zero_head: true,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let img = ImageTensor::filled(64, 64, [0.3, 0.5, 0.7]);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(image_batch(&[img.clone(), img.clone()]).unwrap());
        let logits = model.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(logits), &[2, 5, 64, 64]);
        assert!(tape.data(logits).iter().all(|&v| v == 0.0));
        let probs = model.predict_probs(&img).unwrap();
        assert!(probs.iter().all(|&p| p == 0.2));
    }

    #[test]
    fn forward_rejects_indivisible_extent() {
        let model = SegModel::new(3, &ModelConfig::default()).unwrap();
        let img = ImageTensor::filled(30, 32, [0.5; 3]);
        assert!(model.predict(&img).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = SegModel::new(4, &ModelConfig::default()).unwrap();
        let data: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let img = ImageTensor::new(16, 16, data).unwrap();
        let a = model.predict_probs(&img).unwrap();
        let b = model.predict_probs(&img).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn named_round_trip() {
        let model = SegModel::new(
            3,
            &ModelConfig {
                widths: vec![4, 6],
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let records = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let back = SegModel::from_named(records).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.widths(), &[4, 6]);
        assert!(SegModel::from_named(vec![]).is_err());
    }
}
