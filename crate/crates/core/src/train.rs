//! The consistency-training loop and evaluation.
//!
//! Each iteration draws one source and one target image. The source image is
//! scored with cross-entropy against its label. The target image is labeled
//! by the model itself (argmax, detached), the (image, pseudolabel) pair is
//! perturbed, and the prediction on the perturbed image is scored against the
//! perturbed pseudolabel. Loss terms with zero weight are not evaluated.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{write_image, write_label, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss, entropy_loss, make_pseudolabel, max_square_loss, source_ce, LossWeights,
};
use crate::metrics::{iou, ConfusionMatrix, IouReport};
use crate::perturb::{compose_perturbations, PerturbResult, Perturbation, SourceSample};
use crate::segnet::{image_batch, poly_lr, SegModel, Sgd};
use crate::tensor::{save_checkpoint, Tape, Var};

pub const RECORD_FILE: &str = "record.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

// Independent random streams derived from the run seed. Stream 0 of the same
// seed initializes the model weights.
const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const PERTURB_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endless sequence of dataset indices, reshuffled every epoch.
struct IndexCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexCycle {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        IndexCycle {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub source_index: usize,
    pub target_index: usize,
    pub source_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consistency_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scored_pixels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_square_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entropy_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of completed iterations.
    pub iter: usize,
    pub target: IouReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub target: IouReport,
    pub source: IouReport,
    pub best_iter: usize,
    pub best_target_miou: f64,
    /// Checkpoint file names, relative to the run directory.
    pub final_checkpoint: String,
    pub best_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RecordLine {
    Iter(IterLog),
    Eval(EvalPoint),
    Final(FinalSummary),
}

/// Everything a run logged, in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub lines: Vec<RecordLine>,
}

impl RunRecord {
    pub fn iterations(&self) -> impl Iterator<Item = &IterLog> {
        self.lines.iter().filter_map(|l| match l {
            RecordLine::Iter(x) => Some(x),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalPoint> {
        self.lines.iter().filter_map(|l| match l {
            RecordLine::Eval(x) => Some(x),
            _ => None,
        })
    }

    pub fn summary(&self) -> Option<&FinalSummary> {
        self.lines.iter().rev().find_map(|l| match l {
            RecordLine::Final(x) => Some(x),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line).expect("record lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("bad record line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(RunRecord { lines })
    }
}

/// Confusion matrix of the model's predictions over a whole dataset.
pub fn confusion(model: &SegModel, data: &Dataset) -> Result<ConfusionMatrix> {
    if model.num_classes() != data.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes but the data has {}",
            model.num_classes(),
            data.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let parts = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(img, truth)| {
            let mut cm = ConfusionMatrix::new(data.num_classes);
            cm.accumulate(&model.predict(img)?, truth)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(data.num_classes);
    for cm in &parts {
        total.merge(cm)?;
    }
    Ok(total)
}

pub fn evaluate(model: &SegModel, data: &Dataset) -> Result<IouReport> {
    iou(&confusion(model, data)?)
}

/// A training run in progress. Owns the model, optimizer and random streams.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    source: &'d Dataset,
    target: &'d Dataset,
    model: SegModel,
    sgd: Sgd,
    chain: Vec<Perturbation>,
    source_order: IndexCycle,
    target_order: IndexCycle,
    perturb_rng: ChaCha8Rng,
    dump_dir: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, source: &'d Dataset, target: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::Config("source and target datasets must be non-empty".into()));
        }
        if source.num_classes != target.num_classes {
            return Err(Error::Config(format!(
                "source has {} classes, target {}",
                source.num_classes, target.num_classes
            )));
        }
        if let Some(c) = cfg.num_classes {
            if c != source.num_classes {
                return Err(Error::Config(format!("config says {c} classes, manifests {}", source.num_classes)));
            }
        }
        let model = SegModel::new(source.num_classes, &cfg.model_config())?;
        let sgd = Sgd::new(cfg.optim_config(), &model)?;
        Ok(Trainer {
            chain: cfg.perturb.build(),
            source_order: IndexCycle::new(source.len(), stream(cfg.seed, SOURCE_STREAM)),
            target_order: IndexCycle::new(target.len(), stream(cfg.seed, TARGET_STREAM)),
            perturb_rng: stream(cfg.seed, PERTURB_STREAM),
            cfg: cfg.clone(),
            source,
            target,
            model,
            sgd,
            dump_dir: None,
        })
    }

    /// Where a non-finite loss dumps its batch.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    /// Replaces the configured perturbation chain, e.g. to plug in an
    /// [`ExternalPerturbation`](crate::perturb::ExternalPerturbation).
    pub fn set_chain(&mut self, chain: Vec<Perturbation>) -> Result<()> {
        if chain.is_empty() && self.cfg.loss.lambda_t > 0.0 {
            return Err(Error::Config("consistency training needs a perturbation".into()));
        }
        self.chain = chain;
        Ok(())
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn into_model(self) -> SegModel {
        self.model
    }

    /// Runs one iteration `iter` (zero-based) and returns its log entry.
    pub fn step(&mut self, iter: usize) -> Result<IterLog> {
        let w: &LossWeights = &self.cfg.loss;
        let si = self.source_order.next();
        let ti = self.target_order.next();
        let xs = &self.source.images[si];
        let ys = &self.source.labels[si];
        let xt = &self.target.images[ti];

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let input_s = tape.constant(image_batch(std::slice::from_ref(xs))?);
        let logits_s = self.model.forward(&mut tape, &bound, input_s)?;
        let probs_s = tape.softmax_channels(logits_s)?;
        let ls = source_ce(&mut tape, probs_s, std::slice::from_ref(ys))?;
        let mut total = ls.value;

        let needs_target = w.lambda_t > 0.0 || w.lambda_msl > 0.0 || w.lambda_ent > 0.0;
        let mut log_t = None;
        let mut scored = None;
        let mut log_msl = None;
        let mut log_ent = None;
        let mut perturbed: Option<PerturbResult> = None;
        if needs_target {
            let input_t = tape.constant(image_batch(std::slice::from_ref(xt))?);
            let logits_t = self.model.forward(&mut tape, &bound, input_t)?;
            let probs_t = tape.softmax_channels(logits_t)?;
            if w.lambda_t > 0.0 {
                let pseudo = make_pseudolabel(&mut tape, probs_t, w.tau)?.remove(0);
                let soft = w.soft.then(|| pseudo.probs.clone());
                let start = PerturbResult::with_mask(xt.clone(), pseudo.label, pseudo.valid, soft)?;
                let src = SourceSample { image: xs, label: ys };
                let pert = compose_perturbations(&self.chain, start, Some(src), &mut self.perturb_rng)?;
                let input_p = tape.constant(image_batch(std::slice::from_ref(&pert.image))?);
                let logits_p = self.model.forward(&mut tape, &bound, input_p)?;
                let probs_p = tape.softmax_channels(logits_p)?;
                let soft_targets = pert.soft.clone().map(|s| vec![s]);
                let lt = consistency_loss(
                    &mut tape,
                    probs_p,
                    std::slice::from_ref(&pert.label),
                    std::slice::from_ref(&pert.valid_mask),
                    soft_targets.as_deref(),
                    w,
                )?;
                log_t = Some(scalar(&tape, lt.value));
                scored = Some(lt.scored_pixels);
                total = add_scaled(&mut tape, total, lt.value, w.lambda_t)?;
                perturbed = Some(pert);
            }
            if w.lambda_msl > 0.0 {
                let l = max_square_loss(&mut tape, probs_t)?;
                log_msl = Some(scalar(&tape, l));
                total = add_scaled(&mut tape, total, l, w.lambda_msl)?;
            }
            if w.lambda_ent > 0.0 {
                let l = entropy_loss(&mut tape, probs_t)?;
                log_ent = Some(scalar(&tape, l));
                total = add_scaled(&mut tape, total, l, w.lambda_ent)?;
            }
        }

        let total_value = scalar(&tape, total);
        if !total_value.is_finite() {
            let dump = self.dump_batch(iter, si, ti, perturbed.as_ref())?;
            return Err(Error::NonFinite { iter, dump });
        }
        tape.backward(total)?;
        self.model.absorb_grads(&tape, &bound)?;
        let lr = poly_lr(self.sgd.config(), iter)?;
        self.sgd.step(&mut self.model, iter)?;
        Ok(IterLog {
            iter,
            lr,
            source_index: si,
            target_index: ti,
            source_loss: scalar(&tape, ls.value),
            consistency_loss: log_t,
            scored_pixels: scored,
            max_square_loss: log_msl,
            entropy_loss: log_ent,
            total_loss: total_value,
        })
    }

    fn dump_batch(&self, iter: usize, si: usize, ti: usize, pert: Option<&PerturbResult>) -> Result<PathBuf> {
        let Some(base) = &self.dump_dir else {
            return Ok(PathBuf::new());
        };
        let dir = base.join(format!("nonfinite_{iter:06}"));
        write_image(&dir.join("source_image.png"), &self.source.images[si])?;
        write_label(&dir.join("source_label.png"), &self.source.labels[si])?;
        write_image(&dir.join("target_image.png"), &self.target.images[ti])?;
        if let Some(p) = pert {
            write_image(&dir.join("perturbed_image.png"), &p.image)?;
            write_label(&dir.join("perturbed_pseudolabel.png"), &p.label)?;
        }
        let info = serde_json::json!({ "iter": iter, "source_index": si, "target_index": ti });
        let path = dir.join("batch.json");
        fs::write(&path, info.to_string()).map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.data(v)[0]
}

fn add_scaled(tape: &mut Tape, total: Var, term: Var, weight: f64) -> Result<Var> {
    let scaled = tape.scale(term, weight);
    tape.add(total, scaled)
}

/// Progress hook invoked at every evaluation point.
pub type EvalHook<'a> = &'a mut dyn FnMut(&EvalPoint);

/// Runs a full training schedule on loaded data. With `out_dir` set, the
/// record and the best and final checkpoints are written there.
pub fn train_on(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    out_dir: Option<&Path>,
    mut hook: Option<EvalHook<'_>>,
) -> Result<(SegModel, RunRecord)> {
    let mut trainer = Trainer::new(cfg, source, target)?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            trainer.set_dump_dir(dir);
            let path = dir.join(RECORD_FILE);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut record = RunRecord::default();
    let mut push = |line: RecordLine, record: &mut RunRecord| -> Result<()> {
        if let Some((w, path)) = writer.as_mut() {
            let text = serde_json::to_string(&line).expect("record lines serialize");
            writeln!(w, "{text}").map_err(|e| Error::io(&*path, e))?;
        }
        record.lines.push(line);
        Ok(())
    };
    let save = |model: &SegModel, name: &str| -> Result<()> {
        match out_dir {
            Some(dir) => save_checkpoint(&dir.join(name), &model.named_tensors()),
            None => Ok(()),
        }
    };

    let mut best: Option<(usize, f64)> = None;
    for iter in 0..cfg.max_iter {
        let log = trainer.step(iter)?;
        push(RecordLine::Iter(log), &mut record)?;
        let done = iter + 1;
        if done % cfg.eval_every == 0 || done == cfg.max_iter {
            let point = EvalPoint {
                iter: done,
                target: evaluate(trainer.model(), target)?,
            };
            if best.is_none_or(|(_, m)| point.target.miou > m) {
                best = Some((done, point.target.miou));
                save(trainer.model(), BEST_CHECKPOINT)?;
            }
            if let Some(h) = hook.as_mut() {
                h(&point);
            }
            push(RecordLine::Eval(point), &mut record)?;
        }
    }
    let model = trainer.into_model();
    save(&model, FINAL_CHECKPOINT)?;
    let (best_iter, best_target_miou) = best.expect("the last iteration always evaluates");
    let summary = FinalSummary {
        target: evaluate(&model, target)?,
        source: evaluate(&model, source)?,
        best_iter,
        best_target_miou,
        final_checkpoint: FINAL_CHECKPOINT.into(),
        best_checkpoint: BEST_CHECKPOINT.into(),
    };
    push(RecordLine::Final(summary), &mut record)?;
    if let Some((mut w, path)) = writer {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok((model, record))
}

/// Loads the manifests named by `cfg` and trains, writing into `cfg.out_dir`.
pub fn train(cfg: &TrainConfig, hook: Option<EvalHook<'_>>) -> Result<RunRecord> {
    cfg.validate()?;
    let source = Dataset::load(&Manifest::load(&cfg.source_manifest)?)?;
    let target = Dataset::load(&Manifest::load(&cfg.target_manifest)?)?;
    train_on(cfg, &source, &target, Some(&cfg.out_dir), hook).map(|(_, r)| r)
}

