use std::sync::{Arc, Mutex, OnceLock};

use pixmatch::config::TrainConfig;
use pixmatch::data::{generate_pair_dataset, Dataset, DomainGap, SceneSpec};
use pixmatch::experiment::{cmd_eval, sweep_on, SweepAxis};
use pixmatch::image::ImageTensor;
use pixmatch::losses::LossWeights;
use pixmatch::perturb::{AugConfig, ExternalPerturbation, PerturbResult, Perturbation, SourceSample};
use pixmatch::segnet::{ModelConfig, OptimConfig, SegModel, Sgd};
use pixmatch::tensor::save_checkpoint;
use pixmatch::train::{evaluate, train_on, RecordLine, Trainer};
use pixmatch::{Error, Result};
use rand_chacha::ChaCha8Rng;

struct Pair {
    _dir: tempfile::TempDir,
    source: Dataset,
    target: Dataset,
    target_manifest: std::path::PathBuf,
}

fn generate(spec: &SceneSpec, gap: &DomainGap, n: usize) -> Pair {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = generate_pair_dataset(spec, gap, n, n, dir.path()).unwrap();
    Pair {
        target_manifest: dir.path().join("target.manifest"),
        source: Dataset::load(&s).unwrap(),
        target: Dataset::load(&t).unwrap(),
        _dir: dir,
    }
}

/// A 32-pixel pair, small enough for quick training checks.
fn small() -> &'static Pair {
    static DATA: OnceLock<Pair> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = SceneSpec { image_size: 32, ..SceneSpec::default() };
        generate(&spec, &DomainGap::default(), 40)
    })
}

fn quick_config(max_iter: usize) -> TrainConfig {
    TrainConfig {
        max_iter,
        eval_every: max_iter.div_ceil(2),
        ..TrainConfig::default()
    }
}

#[test]
fn source_training_cuts_loss_tenfold() {
    let data = small();
    let mut cfg = quick_config(2000);
    cfg.loss.lambda_t = 0.0;
    let (model, record) = train_on(&cfg, &data.source, &data.target, None, None).unwrap();
    let losses: Vec<f64> = record.iterations().map(|l| l.source_loss).collect();
    let tail = &losses[losses.len() - 100..];
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(late * 10.0 <= losses[0], "loss {} -> {late}", losses[0]);
    assert!(model.params().iter().all(|(_, p)| p.data().iter().all(|v| v.is_finite())));
}

#[test]
fn records_are_monotone_with_full_eval_rows() {
    let data = small();
    let cfg = quick_config(30);
    let (_, record) = train_on(&cfg, &data.source, &data.target, None, None).unwrap();
    let iters: Vec<usize> = record.iterations().map(|l| l.iter).collect();
    assert_eq!(iters, (0..30).collect::<Vec<_>>());
    let evals: Vec<_> = record.evals().collect();
    assert_eq!(evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![15, 30]);
    assert!(evals.iter().all(|e| e.target.per_class.len() == 5));
    assert!(matches!(record.lines.last(), Some(RecordLine::Final(_))));
    assert!(record.iterations().all(|l| l.consistency_loss.is_some() && l.lr > 0.0));
}

#[test]
fn zero_gradient_step_without_decay_is_a_no_op() {
    let mut model = SegModel::new(5, &ModelConfig::default()).unwrap();
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..TrainConfig::default().optim_config()
    };
    let mut sgd = Sgd::new(cfg, &model).unwrap();
    let before = model.clone();
    for iter in 0..3 {
        for (_, p) in model.params_mut() {
            let zeros = vec![0.0; p.numel()];
            p.accumulate_grad(&zeros).unwrap();
        }
        sgd.step(&mut model, iter).unwrap();
    }
    for ((_, a), (_, b)) in before.params().iter().zip(model.params()) {
        let bits = |t: &pixmatch::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

/// Records the source image handed to the perturbation.
struct Spy(Arc<Mutex<Vec<ImageTensor>>>);

impl ExternalPerturbation for Spy {
    fn name(&self) -> &str {
        "spy"
    }

    fn apply(&self, input: PerturbResult, source: Option<SourceSample<'_>>, _: &mut ChaCha8Rng) -> Result<PerturbResult> {
        let src = source.ok_or_else(|| Error::Config("spy needs a source".into()))?;
        self.0.lock().unwrap().push(src.image.clone());
        Ok(input)
    }
}

#[test]
fn perturbation_mixes_the_scored_source_sample() {
    let data = small();
    let cfg = quick_config(25);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let mut trainer = Trainer::new(&cfg, &data.source, &data.target).unwrap();
    trainer
        .set_chain(vec![
            Perturbation::Augment(AugConfig::default()),
            Perturbation::External(Arc::new(Spy(seen.clone()))),
        ])
        .unwrap();
    let logs: Vec<_> = (0..25).map(|i| trainer.step(i).unwrap()).collect();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), logs.len());
    for (log, img) in logs.iter().zip(seen.iter()) {
        assert_eq!(img, &data.source.images[log.source_index]);
    }
    assert!(trainer.set_chain(Vec::new()).is_err());
}

#[test]
fn sweep_zero_row_equals_a_source_only_run() {
    let data = small();
    let base = quick_config(40);
    let table = sweep_on(&base, SweepAxis::LambdaT, &[0.0, 0.1], &data.source, &data.target, None, None).unwrap();
    let source_only = TrainConfig {
        loss: LossWeights { lambda_t: 0.0, ..LossWeights::default() },
        perturb: pixmatch::config::PerturbSection { chain: Vec::new(), ..Default::default() },
        ..base.clone()
    };
    let (_, record) = train_on(&source_only, &data.source, &data.target, None, None).unwrap();
    assert_eq!(table.rows[0].record, record);
    assert_ne!(table.rows[1].record, record);
}

#[test]
fn untrained_zero_head_scores_like_constant_background() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    let model = SegModel::new(5, &ModelConfig { zero_head: true, ..ModelConfig::default() }).unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    save_checkpoint(&ckpt, &model.named_tensors()).unwrap();
    let report = cmd_eval(&ckpt, &data.target_manifest).unwrap();

    // Uniform output breaks ties toward class 0, so IoU_0 = n_0 / N and the
    // other present classes score 0.
    let (mut n0, mut n, mut present) = (0usize, 0usize, [false; 5]);
    for l in &data.target.labels {
        for &v in l.data() {
            n += 1;
            n0 += (v == 0) as usize;
            present[v as usize] = true;
        }
    }
    let k = present.iter().filter(|&&p| p).count();
    let expected = (n0 as f64 / n as f64) / k as f64;
    assert!((report.miou - expected).abs() < 1e-12, "{} vs {expected}", report.miou);

    let four = SegModel::new(4, &ModelConfig::default()).unwrap();
    save_checkpoint(&ckpt, &four.named_tensors()).unwrap();
    assert!(cmd_eval(&ckpt, &data.target_manifest).is_err());
}

#[test]
fn diverging_run_dumps_its_batch() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(200);
    cfg.optim.base_lr = 1e6;
    let err = train_on(&cfg, &data.source, &data.target, Some(dir.path()), None).unwrap_err();
    let Error::NonFinite { dump, .. } = &err else {
        panic!("expected a non-finite loss, got {err}");
    };
    assert!(dump.starts_with(dir.path()));
    for f in ["batch.json", "source_image.png", "source_label.png", "target_image.png"] {
        assert!(dump.join(f).is_file(), "missing {f}");
    }
    assert_eq!(err.kind(), "non-finite");
}

/// Without a domain gap the target is a fresh draw from the source
/// distribution, so source-trained scores agree across domains.
#[test]
fn identity_gap_scores_match_across_domains() {
    let pair = generate(&SceneSpec::default(), &DomainGap::identity(), 200);
    for seed in 0..3 {
        let mut cfg = quick_config(2000);
        cfg.seed = seed;
        cfg.loss.lambda_t = 0.0;
        let (model, _) = train_on(&cfg, &pair.source, &pair.target, None, None).unwrap();
        let (s, t) = (evaluate(&model, &pair.source).unwrap(), evaluate(&model, &pair.target).unwrap());
        assert!(
            (s.miou - t.miou).abs() <= 0.02,
            "seed {seed}: source {:.4} target {:.4}",
            s.miou,
            t.miou
        );
    }
}
