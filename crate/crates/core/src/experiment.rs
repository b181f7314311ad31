//! Commands behind the command-line front end: data generation, evaluation,
//! ablation sweeps and visual dumps.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PerturbSection, TrainConfig};
use crate::data::{
    encode_rgb, encode_rgb8, generate_pair_dataset, write_bytes, Dataset, DomainGap, Manifest, SceneSpec,
    CLASS_NAMES,
};
use crate::error::{Error, Result};
use crate::image::{LabelMap, IGNORE};
use crate::metrics::IouReport;
use crate::perturb::{PerturbResult, SourceSample};
use crate::segnet::SegModel;
use crate::tensor::load_checkpoint;
use crate::train::{evaluate, train_on, EvalHook, RunRecord};

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub scene: SceneSpec,
    pub gap: DomainGap,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_source: 200,
            n_target: 200,
            scene: SceneSpec::default(),
            gap: DomainGap::default(),
        }
    }
}

impl DataConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn cmd_generate(cfg: &DataConfig, out_dir: &Path) -> Result<(Manifest, Manifest)> {
    generate_pair_dataset(&cfg.scene, &cfg.gap, cfg.n_source, cfg.n_target, out_dir)
}

pub fn load_model(checkpoint: &Path) -> Result<SegModel> {
    SegModel::from_named(load_checkpoint(checkpoint)?)
}

/// Scores a checkpoint on every sample of a manifest.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path) -> Result<IouReport> {
    let model = load_model(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    if manifest.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the manifest has {}",
            model.num_classes(),
            manifest.num_classes
        )));
    }
    evaluate(&model, &Dataset::load(&manifest)?)
}

pub fn class_names(c: usize) -> Vec<String> {
    (0..c)
        .map(|k| CLASS_NAMES.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaT,
    Tau,
    LambdaMsl,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LambdaT => "lambda_t",
            SweepAxis::Tau => "tau",
            SweepAxis::LambdaMsl => "lambda_msl",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepAxis::LambdaT => cfg.loss.lambda_t = value,
            SweepAxis::Tau => cfg.loss.tau = value,
            SweepAxis::LambdaMsl => cfg.loss.lambda_msl = value,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lambda_t" => Ok(SweepAxis::LambdaT),
            "tau" => Ok(SweepAxis::Tau),
            "lambda_msl" => Ok(SweepAxis::LambdaMsl),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (expected lambda_t, tau or lambda_msl)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a comma-separated list of numbers.
pub fn parse_values(csv: &str) -> Result<Vec<f64>> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad value `{s}`: {e}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub target: IouReport,
    pub source_miou: f64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub class_names: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One row per swept value: the value, per-class target IoU, target
    /// mIoU and source mIoU, all in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(self.axis.name());
        for n in &self.class_names {
            write!(out, ",{n}").unwrap();
        }
        out.push_str(",miou,source_miou\n");
        for row in &self.rows {
            write!(out, "{}", row.value).unwrap();
            for v in &row.target.per_class {
                match v {
                    Some(x) => write!(out, ",{:.2}", 100.0 * x).unwrap(),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{:.2},{:.2}", 100.0 * row.target.miou, 100.0 * row.source_miou).unwrap();
        }
        out
    }
}

/// One training run per value, each from the same seed, evaluated on the
/// full target set. Run directories go under `out_dir` as `<axis>_<value>`.
pub fn sweep_on(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    source: &Dataset,
    target: &Dataset,
    out_dir: Option<&Path>,
    mut hook: Option<&mut dyn FnMut(f64, &crate::train::EvalPoint)>,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value);
        cfg.validate()?;
        let run_dir = out_dir.map(|d| d.join(format!("{}_{value}", axis.name())));
        let mut inner = |p: &crate::train::EvalPoint| {
            if let Some(h) = hook.as_mut() {
                h(value, p);
            }
        };
        let inner: EvalHook<'_> = &mut inner;
        let (_, record) = train_on(&cfg, source, target, run_dir.as_deref(), Some(inner))?;
        let summary = record.summary().expect("completed runs end with a summary").clone();
        rows.push(SweepRow {
            value,
            target: summary.target,
            source_miou: summary.source.miou,
            record,
        });
    }
    let table = SweepTable {
        axis,
        class_names: class_names(source.num_classes),
        rows,
    };
    if let Some(dir) = out_dir {
        write_bytes(&dir.join(format!("sweep_{}.csv", axis.name())), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

pub fn cmd_sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: &Path,
    hook: Option<&mut dyn FnMut(f64, &crate::train::EvalPoint)>,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    base.validate()?;
    let source = Dataset::load(&Manifest::load(&base.source_manifest)?)?;
    let target = Dataset::load(&Manifest::load(&base.target_manifest)?)?;
    sweep_on(base, axis, values, &source, &target, Some(out_dir), hook)
}

/// Display colors for class indices 0..5; other indices get a generated
/// color, and IGNORE is white.
const VIS_COLORS: [[u8; 3]; 5] = [[0, 0, 0], [220, 20, 60], [0, 142, 70], [30, 60, 200], [250, 200, 0]];

pub fn class_color(k: u8) -> [u8; 3] {
    match k {
        IGNORE => [255, 255, 255],
        k if (k as usize) < VIS_COLORS.len() => VIS_COLORS[k as usize],
        k => [k, 255 - k, 128],
    }
}

pub fn color_class(rgb: [u8; 3]) -> Option<u8> {
    if rgb == [255, 255, 255] {
        return Some(IGNORE);
    }
    if let Some(k) = VIS_COLORS.iter().position(|c| *c == rgb) {
        return Some(k as u8);
    }
    let [r, g, b] = rgb;
    (b == 128 && g == 255 - r && r as usize >= VIS_COLORS.len() && r != IGNORE).then_some(r)
}

pub fn render_labels(label: &LabelMap) -> Vec<u8> {
    label.data().iter().flat_map(|&k| class_color(k)).collect()
}

/// Inverts [`render_labels`]; errors on a color outside the palette.
pub fn decode_labels(h: usize, w: usize, rgb: &[u8]) -> Result<LabelMap> {
    let data = rgb
        .chunks_exact(3)
        .map(|px| color_class([px[0], px[1], px[2]]).ok_or_else(|| Error::Label(format!("color {px:?} is not in the palette"))))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(h, w, data)
}

/// Writes, for each of the first `n` samples, `NNN_input.png`, `NNN_gt.png`
/// and `NNN_pred.png`, plus `NNN_<perturbation>_before.png` /
/// `NNN_<perturbation>_after.png` for every perturbation in the chain. Mixing
/// perturbations take the next sample as their partner.
pub fn cmd_visualize(
    checkpoint: &Path,
    manifest: &Path,
    n: usize,
    perturb: &PerturbSection,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::Config("visualize needs n >= 1".into()));
    }
    let model = load_model(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    if manifest.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the manifest has {}",
            model.num_classes(),
            manifest.num_classes
        )));
    }
    let data = Dataset::load(&manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = out_dir.join(name);
        write_bytes(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    for i in 0..n.min(data.len()) {
        let (img, gt) = (&data.images[i], &data.labels[i]);
        let (h, w) = img.dims();
        let pred = model.predict(img)?;
        emit(format!("{i:03}_input.png"), encode_rgb(img))?;
        emit(format!("{i:03}_gt.png"), encode_rgb8(h, w, &render_labels(gt)))?;
        emit(format!("{i:03}_pred.png"), encode_rgb8(h, w, &render_labels(&pred)))?;
        let j = (i + 1) % data.len();
        let partner = SourceSample {
            image: &data.images[j],
            label: &data.labels[j],
        };
        for p in perturb.build() {
            let out = p.apply(PerturbResult::new(img.clone(), pred.clone())?, Some(partner), &mut rng)?;
            emit(format!("{i:03}_{}_before.png", p.name()), encode_rgb(img))?;
            emit(format!("{i:03}_{}_after.png", p.name()), encode_rgb(&out.image))?;
        }
    }
    Ok(written)
}
