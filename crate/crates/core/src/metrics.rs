//! Confusion-matrix accumulation and intersection-over-union scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMap, IGNORE};

/// `C × C` pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major `[truth][prediction]` counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("confusion matrix rows must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-IGNORE truth pixel. A prediction outside `0..C`
    /// (including IGNORE) is an error, as is a truth value outside `0..C`
    /// other than IGNORE.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} and truth {:?} differ",
                pred.dims(),
                truth.dims()
            )));
        }
        let c = self.classes;
        let mut delta = vec![0u64; c * c];
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= c {
                return Err(Error::Label(format!("truth value {t} with {c} classes")));
            }
            if p >= c {
                return Err(Error::Label(format!("prediction value {p} with {c} classes")));
            }
            delta[t * c + p] += 1;
        }
        for (a, d) in self.counts.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    /// Adds the counts of another matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` marks a class absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the present classes.
    pub miou: f64,
}

/// Per-class IoU `cm[c][c] / (row_c + col_c − cm[c][c])` and their mean,
/// skipping classes whose denominator is zero.
pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoClasses);
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou })
}

impl IouReport {
    /// CSV table with a `class,iou` header, one row per class (empty value
    /// for an absent class) and a final `mIoU` row.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("class,iou\n");
        for (k, v) in self.per_class.iter().enumerate() {
            let name = class_names.get(k).map_or_else(|| k.to_string(), |s| s.to_string());
            match v {
                Some(x) => writeln!(out, "{name},{x:.6}").unwrap(),
                None => writeln!(out, "{name},").unwrap(),
            }
        }
        writeln!(out, "mIoU,{:.6}", self.miou).unwrap();
        out
    }
}
