//! Procedural scenes of non-overlapping shapes on a plain background.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};
use crate::perturb::{blur_kernel_size, gaussian_blur};

pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "square", "triangle", "stripe"];

/// Canonical class colors of the source domain.
pub const PALETTE: [[f64; 3]; 5] = [
    [0.40, 0.42, 0.40],
    [0.85, 0.30, 0.25],
    [0.30, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.30],
];

/// Stripe half-width as a fraction of the circumradius.
const STRIPE_HALF_WIDTH: f64 = 0.35;
/// Sub-samples per axis for anti-aliased coverage.
const SUPERSAMPLE: usize = 4;
/// Placement attempts before a scene restarts its layout.
const PLACE_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Circumradius range in pixels at a 64-pixel image; scales with `image_size`.
    pub radius: (f64, f64),
    /// Per-instance uniform color jitter around the class color.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 5,
            min_shapes: 2,
            max_shapes: 4,
            radius: (6.0, 11.0),
            color_jitter: 0.12,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must lie in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi) || self.scaled_radius(hi) * 2.0 >= self.image_size as f64 {
            return Err(Error::Config(format!("invalid radius range {:?}", self.radius)));
        }
        if !(0.0..=0.5).contains(&self.color_jitter) {
            return Err(Error::Config("color_jitter outside [0, 0.5]".into()));
        }
        Ok(())
    }

    fn scaled_radius(&self, r: f64) -> f64 {
        r * self.image_size as f64 / 64.0
    }

    /// Expected fraction of pixels per class, from the sampling distribution
    /// and the continuous shape areas.
    pub fn expected_class_fractions(&self) -> Vec<f64> {
        let kinds = self.num_classes - 1;
        let mean_count = (self.min_shapes + self.max_shapes) as f64 / 2.0;
        let (a, b) = (self.scaled_radius(self.radius.0), self.scaled_radius(self.radius.1));
        let mean_r2 = if b > a {
            (b.powi(3) - a.powi(3)) / (3.0 * (b - a))
        } else {
            a * a
        };
        let total = (self.image_size * self.image_size) as f64;
        let mut out = vec![0.0; self.num_classes];
        for (k, slot) in out.iter_mut().enumerate().skip(1) {
            *slot = mean_count / kinds as f64 * ShapeKind::from_class(k as u8).area_coefficient() * mean_r2 / total;
        }
        out[0] = 1.0 - out.iter().sum::<f64>();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Stripe,
}

impl ShapeKind {
    fn from_class(class: u8) -> Self {
        match class {
            1 => ShapeKind::Circle,
            2 => ShapeKind::Square,
            3 => ShapeKind::Triangle,
            _ => ShapeKind::Stripe,
        }
    }

    /// Area divided by the squared circumradius.
    fn area_coefficient(self) -> f64 {
        match self {
            ShapeKind::Circle => PI,
            ShapeKind::Square => 2.0,
            ShapeKind::Triangle => 3.0 * 3f64.sqrt() / 4.0,
            ShapeKind::Stripe => 4.0 * STRIPE_HALF_WIDTH * (1.0 - STRIPE_HALF_WIDTH * STRIPE_HALF_WIDTH).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    /// Circumradius in pixels.
    pub radius: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        ShapeKind::from_class(self.class)
    }

    /// Point-in-shape test in image coordinates (pixel `(y, x)` has its
    /// center at `(x + 0.5, y + 0.5)`).
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let r = self.radius;
        if dx * dx + dy * dy > r * r {
            return false;
        }
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.kind() {
            ShapeKind::Circle => true,
            ShapeKind::Square => {
                let half = r / 2f64.sqrt();
                u.abs() <= half && v.abs() <= half
            }
            ShapeKind::Triangle => (0..3).all(|i| {
                // inside all three edges: each edge lies at distance r/2 from the center
                let t = self.angle + PI / 2.0 + i as f64 * 2.0 * PI / 3.0;
                dx * t.cos() + dy * t.sin() <= r / 2.0
            }),
            ShapeKind::Stripe => {
                let half_len = (1.0 - STRIPE_HALF_WIDTH * STRIPE_HALF_WIDTH).sqrt() * r;
                u.abs() <= half_len && v.abs() <= STRIPE_HALF_WIDTH * r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub background: [f64; 3],
    pub shapes: Vec<Shape>,
}

fn jittered(base: [f64; 3], amount: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|v| if amount > 0.0 { v + rng.gen_range(-amount..=amount) } else { v })
}

/// Draws one scene. Shape count, kinds, radii, angles and colors are drawn
/// first; positions are then placed by rejection so that bounding circles
/// stay disjoint and inside the image.
pub fn sample_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    spec.validate()?;
    let size = spec.image_size as f64;
    let background = jittered(PALETTE[0], spec.color_jitter, rng);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let class = rng.gen_range(1..spec.num_classes) as u8;
            let radius = spec.scaled_radius(rng.gen_range(spec.radius.0..=spec.radius.1));
            let angle = rng.gen_range(0.0..2.0 * PI);
            let color = jittered(PALETTE[class as usize], spec.color_jitter, rng);
            Shape {
                class,
                cx: 0.0,
                cy: 0.0,
                radius,
                angle,
                color,
            }
        })
        .collect();
    'layout: loop {
        for i in 0..shapes.len() {
            let r = shapes[i].radius;
            let placed = (0..PLACE_ATTEMPTS).find_map(|_| {
                let cx = rng.gen_range(r..=size - r);
                let cy = rng.gen_range(r..=size - r);
                let free = shapes[..i].iter().all(|o| {
                    let d = r + o.radius + 1.0;
                    (cx - o.cx).powi(2) + (cy - o.cy).powi(2) >= d * d
                });
                free.then_some((cx, cy))
            });
            match placed {
                Some((cx, cy)) => {
                    shapes[i].cx = cx;
                    shapes[i].cy = cy;
                }
                None => continue 'layout,
            }
        }
        return Ok(Scene {
            size: spec.image_size,
            background,
            shapes,
        });
    }
}

impl Scene {
    /// Hard rasterization: a pixel takes the class of the shape covering its center.
    pub fn rasterize_labels(&self) -> LabelMap {
        let n = self.size;
        let mut label = LabelMap::filled(n, n, 0);
        for s in &self.shapes {
            for (y, x) in bounding_pixels(s, n) {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    label.data_mut()[y * n + x] = s.class;
                }
            }
        }
        label
    }

    /// Anti-aliased rendering by supersampled coverage. `shift[c]` is added
    /// to every color of class `c`.
    pub fn render(&self, shift: &[[f64; 3]]) -> ImageTensor {
        let n = self.size;
        let offset = |class: usize| shift.get(class).copied().unwrap_or([0.0; 3]);
        let bg = add3(self.background, offset(0));
        let mut img = ImageTensor::filled(n, n, bg);
        let step = 1.0 / SUPERSAMPLE as f64;
        let full = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for s in &self.shapes {
            let color = add3(s.color, offset(s.class as usize));
            for (y, x) in bounding_pixels(s, n) {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += s.contains(px, py) as usize;
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / full;
                    let old = img.pixel(y, x);
                    img.set_pixel(y, x, [0, 1, 2].map(|c| old[c] * (1.0 - a) + color[c] * a));
                }
            }
        }
        img.clamp_unit();
        img
    }
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn bounding_pixels(s: &Shape, n: usize) -> impl Iterator<Item = (usize, usize)> {
    let lo = |c: f64| ((c - s.radius).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + s.radius).ceil() as usize).min(n);
    let (x0, x1, y0, y1) = (lo(s.cx), hi(s.cx), lo(s.cy), hi(s.cy));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (y, x)))
}

/// Appearance shift applied to target-domain scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainGap {
    /// RGB offset per class, added to the class color before rendering.
    /// The default is a shared warm cast plus a small per-class tilt.
    pub palette_shift: Vec<[f64; 3]>,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Per-channel power applied last; values above 1 darken mid-tones.
    pub gamma: f64,
}

impl Default for DomainGap {
    fn default() -> Self {
        DomainGap {
            palette_shift: vec![
                [0.175, -0.1125, 0.1375],
                [0.1, -0.0625, 0.125],
                [0.2, -0.1375, 0.125],
                [0.1875, -0.05, 0.0375],
                [0.125, -0.1625, 0.15],
            ],
            noise_sigma: 0.05,
            blur_sigma: 1.0,
            gamma: 1.3,
        }
    }
}

impl DomainGap {
    /// No shift at all: target scenes follow the source distribution.
    pub fn identity() -> Self {
        DomainGap {
            palette_shift: Vec::new(),
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.palette_shift.iter().flatten().all(|v| v.is_finite() && v.abs() <= 1.0);
        if !finite || !(self.noise_sigma >= 0.0) || !(self.blur_sigma >= 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config(format!("invalid domain gap {self:?}")));
        }
        Ok(())
    }

    /// Renders `scene` under the gap: shifted palette, then Gaussian noise,
    /// blur and gamma, clamped to `[0, 1]`.
    pub fn render(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        self.validate()?;
        let mut img = scene.render(&self.palette_shift);
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
            img.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
            img.clamp_unit();
        }
        if self.blur_sigma > 0.0 {
            let k = blur_kernel_size(self.blur_sigma, usize::MAX);
            gaussian_blur(&mut img, self.blur_sigma, k);
        }
        if self.gamma != 1.0 {
            img.data_mut().iter_mut().for_each(|v| *v = v.powf(self.gamma));
        }
        img.clamp_unit();
        Ok(img)
    }
}
