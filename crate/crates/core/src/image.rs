//! Image and label-map containers shared by the data, perturbation and model code.

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Three-channel image with values in `[0, 1]`, stored channel-planar
/// (`[3][H][W]`), which is also the model's NCHW input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        ImageTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Per-pixel class indices; [`IGNORE`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Fails if any value is neither a class below `num_classes` nor [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= num_classes)
        {
            Some(v) => Err(Error::Label(format!(
                "label value {v} with {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Per-class pixel counts for values below `num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &v in &self.data {
            if (v as usize) < num_classes {
                h[v as usize] += 1;
            }
        }
        h
    }
}

/// Per-pixel class distributions, channel-planar `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SoftLabel {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {classes}x{height}x{width} distribution map",
                data.len()
            )));
        }
        Ok(SoftLabel {
            classes,
            height,
            width,
            data,
        })
    }

    /// Degenerate one-hot distributions; [`IGNORE`] pixels become all-zero.
    pub fn one_hot(label: &LabelMap, classes: usize) -> Self {
        let plane = label.height * label.width;
        let mut data = vec![0.0; classes * plane];
        for (p, &v) in label.data.iter().enumerate() {
            if (v as usize) < classes {
                data[v as usize * plane + p] = 1.0;
            }
        }
        SoftLabel {
            classes,
            height: label.height,
            width: label.width,
            data,
        }
    }
}
