use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pixmatch::config::TrainConfig;
use pixmatch::data::{write_bytes, DomainGap};
use pixmatch::experiment::{
    class_names, cmd_eval, cmd_generate, cmd_sweep, cmd_visualize, parse_values, DataConfig, SweepAxis,
};
use pixmatch::train::{train, EvalPoint};
use pixmatch::{Error, Result};

/// Consistency-training lab for domain-adaptive segmentation on synthetic scenes.
#[derive(Parser)]
#[command(name = "pixmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic source/target dataset pair with manifests.
    GenerateData(GenerateArgs),
    /// Train with source supervision plus target consistency.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest; prints a per-class IoU CSV.
    Eval(EvalArgs),
    /// Train once per value of one loss knob and tabulate target IoU.
    Sweep(SweepArgs),
    /// Dump input, ground truth, prediction and perturbation images.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML with n_source, n_target, [scene] and [gap] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
    /// Render the target exactly like the source.
    #[arg(long)]
    identity_gap: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the CSV report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// lambda_t, tau or lambda_msl.
    #[arg(long)]
    axis: String,
    /// Comma-separated values, e.g. 0,0.05,0.1.
    #[arg(long)]
    values: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Training config whose perturbation chain is dumped.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "vis")]
    out: PathBuf,
}

fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn progress(p: &EvalPoint) {
    eprintln!("iter {:>6}  target mIoU {:.2}", p.iter, 100.0 * p.target.miou);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => {
            let mut cfg = match &a.config {
                Some(p) => DataConfig::load(p)?,
                None => DataConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.scene.seed = s;
            }
            if let Some(n) = a.n_source {
                cfg.n_source = n;
            }
            if let Some(n) = a.n_target {
                cfg.n_target = n;
            }
            if a.identity_gap {
                cfg.gap = DomainGap::identity();
            }
            let (s, t) = cmd_generate(&cfg, &a.out)?;
            println!(
                "wrote {} source and {} target samples to {}",
                s.len(),
                t.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let mut cfg = load_train_config(&a.config, a.seed)?;
            if let Some(out) = a.out {
                cfg.out_dir = out;
            }
            let mut hook = progress;
            let record = train(&cfg, Some(&mut hook))?;
            let s = record.summary().expect("completed runs end with a summary");
            println!(
                "target mIoU {:.2}  source mIoU {:.2}  best {:.2} at iter {}  run dir {}",
                100.0 * s.target.miou,
                100.0 * s.source.miou,
                100.0 * s.best_target_miou,
                s.best_iter,
                cfg.out_dir.display()
            );
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a.checkpoint, &a.manifest)?;
            let names = class_names(report.per_class.len());
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let csv = report.to_csv(&names);
            if let Some(out) = &a.out {
                write_bytes(out, csv.as_bytes())?;
            }
            print!("{csv}");
        }
        Command::Sweep(a) => {
            let cfg = load_train_config(&a.config, a.seed)?;
            let axis: SweepAxis = a.axis.parse()?;
            let values = parse_values(&a.values)?;
            let mut hook = |v: f64, p: &EvalPoint| {
                eprintln!("{axis}={v}  iter {:>6}  target mIoU {:.2}", p.iter, 100.0 * p.target.miou);
            };
            let table = cmd_sweep(&cfg, axis, &values, &a.out, Some(&mut hook))?;
            print!("{}", table.to_csv());
        }
        Command::Visualize(a) => {
            let perturb = match &a.config {
                Some(p) => TrainConfig::load(p)?.perturb,
                None => TrainConfig::default().perturb,
            };
            let files = cmd_visualize(&a.checkpoint, &a.manifest, a.n, &perturb, a.seed, &a.out)?;
            println!("wrote {} images to {}", files.len(), a.out.display());
        }
    }
    Ok(())
}

fn one_line(e: &Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.render().to_string();
            let first: Vec<&str> = rendered.lines().take_while(|l| !l.trim().is_empty()).map(str::trim).collect();
            eprintln!("error[usage]: {}", first.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
