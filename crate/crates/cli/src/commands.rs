use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::Serialize;

use nodebnn::checkpoint::Checkpoint;
use nodebnn::config::RunConfig;
use nodebnn::data::{corruption_suite, load_idx_dir, parse_idx_images, save_idx_dir, synthetic_digits, Split};
use nodebnn::experiments::{noisy_labels as run_noisy, sweep as run_sweep, train_run};
use nodebnn::extraction::{generate_corruptions, save_artifacts, ExtractionConfig};
use nodebnn::metrics::pca_overlap;
use nodebnn::report::evaluate;
use nodebnn::shift::shift_report;
use nodebnn::{CorruptionSpec, Dataset, Error, LatentStructure, Model};

/// 0 success, 1 usage, 2 data, 3 numeric divergence.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Divergence { .. } | Error::NonFinite { .. } => 3,
                Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Shape(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad list item `{s}`")))
        .collect()
}

fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{s}`"))?;
        cfg.set(k.trim(), v.trim(), 0)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>> {
    paths
        .iter()
        .map(|p| Ok(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.model))
        .collect()
}

fn load_test(dir: &Path, limit: Option<usize>) -> Result<Dataset> {
    let ds = load_idx_dir(dir, Split::Test).with_context(|| format!("reading test split from {}", dir.display()))?;
    Ok(match limit {
        Some(n) => ds.head(n.min(ds.len())),
        None => ds,
    })
}

/// Writes `value` as `<path>.json` and `csv` as `<path>.csv`.
fn write_report(path: &Path, value: &impl Serialize, csv: Option<String>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(value)?)?;
    if let Some(csv) = csv {
        fs::write(path.with_extension("csv"), csv)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    gamma: Option<f64>,
    /// Mixture components.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    structure: Option<LatentStructure>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log.
    #[arg(long)]
    history: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, &a.sets)?;
    if let Some(k) = a.k {
        cfg.components = k;
    }
    if let Some(s) = a.structure {
        cfg.structure = s;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let gamma = a.gamma.unwrap_or(cfg.gamma);
    cfg.validate()?;
    let (train, _) = cfg.load_data()?;
    let prior = cfg.prior()?;
    let objective = nodebnn::GammaElboConfig { gamma, ..cfg.objective(train.len()) };
    let snapshot = |model: &Model| Checkpoint {
        model: model.clone(),
        prior,
        train: cfg.train.clone(),
        objective: objective.clone(),
        rng: None,
    };
    let every = cfg.checkpoint_every;
    let out = a.out.clone();
    let (model, history) = train_run(&cfg, gamma, cfg.train.seed, &train, &mut |r, m| {
        eprintln!(
            "epoch {:>3}  beta {:.3}  objective {:.4e}  entropy {:.2}",
            r.epoch, r.beta, r.objective, r.entropy
        );
        if every > 0 && (r.epoch + 1) % every == 0 {
            let p = PathBuf::from(format!("{}.epoch{:03}", out.display(), r.epoch + 1));
            snapshot(m).save(&p)?;
        }
        Ok(())
    })?;
    let mut ckpt = snapshot(&model);
    ckpt.rng = history.rng.clone();
    ckpt.save(&a.out)?;
    if let Some(h) = a.history {
        fs::write(h, serde_json::to_string_pretty(&history)?)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Repeat to evaluate an ensemble.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    /// Directory holding the IDX test split.
    #[arg(long)]
    data: PathBuf,
    /// Also evaluate the corruption suite.
    #[arg(long)]
    corrupted: bool,
    #[arg(long, default_value_t = 30)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    corruption_seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    report: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let models = load_models(&a.ckpt)?;
    let test = load_test(&a.data, a.limit)?;
    let suite = if a.corrupted { corruption_suite(a.corruption_seed) } else { Vec::new() };
    let gamma = Checkpoint::load(&a.ckpt[0])?.objective.gamma;
    let r = evaluate(&models, &test, &suite, a.samples, a.seed, gamma)?;
    eprintln!("clean nll {:.4}  error {:.4}  ece {:.4}", r.clean.nll, r.clean.error, r.clean.ece);
    if a.corrupted {
        eprintln!("corrupted nll {:.4}  error {:.4}", r.corrupted_nll(), r.corrupted_error());
    }
    write_report(&a.report, &r, Some(r.to_csv()))
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "0,0.5,1,2,4")]
    gammas: String,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Keep a checkpoint of every run.
    #[arg(long)]
    save_models: bool,
    #[arg(long)]
    report: PathBuf,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.sets)?;
    let gammas: Vec<f64> = parse_list(&a.gammas)?;
    let seeds: Vec<u64> = parse_list(&a.seeds)?;
    let (train, test) = cfg.load_data()?;
    let suite = corruption_suite(cfg.corruption_seed);
    fs::create_dir_all(&a.report)?;
    let dir = a.report.clone();
    let report = run_sweep(&cfg, &gammas, &seeds, &train, &test, &suite, &mut |run, model| {
        eprintln!(
            "gamma {} seed {}: clean nll {:.4}  corrupted nll {:.4}",
            run.gamma,
            run.seed,
            run.report.clean.nll,
            run.report.corrupted_nll()
        );
        let stem = dir.join(format!("run-g{}-s{}", run.gamma, run.seed));
        fs::write(stem.with_extension("json"), run.report.to_json()?)?;
        fs::write(stem.with_extension("csv"), run.report.to_csv())?;
        if a.save_models {
            Checkpoint {
                model: model.clone(),
                prior: cfg.prior()?,
                train: nodebnn::TrainConfig { seed: run.seed, ..cfg.train.clone() },
                objective: nodebnn::GammaElboConfig { gamma: run.gamma, ..cfg.objective(train.len()) },
                rng: run.history.rng.clone(),
            }
            .save(&stem.with_extension("ckpt"))?;
        }
        Ok(())
    })?;
    fs::write(a.report.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(a.report.join("summary.csv"), report.summary_csv())?;
    Ok(())
}

#[derive(Args)]
pub struct NoisyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value = "0,4")]
    gammas: String,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    report: PathBuf,
}

pub fn noisy_labels(a: NoisyArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.sets)?;
    let (train, test) = cfg.load_data()?;
    let r = run_noisy(&cfg, a.fraction, &parse_list(&a.gammas)?, &parse_list(&a.seeds)?, &train, &test)?;
    for run in &r.runs {
        eprintln!("gamma {} seed {}: final gap {:.4}", run.gamma, run.seed, run.final_gap());
    }
    fs::create_dir_all(&a.report)?;
    write_report(&a.report.join("noisy-labels"), &r, Some(r.to_csv()))
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// IDX image file.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 8)]
    per_image: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    #[arg(long, default_value_t = 30)]
    frozen_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    let model = load_models(std::slice::from_ref(&a.ckpt))?.remove(0);
    let bytes = fs::read(&a.images).with_context(|| format!("reading {}", a.images.display()))?;
    let mut images = parse_idx_images(&bytes)?;
    if let Some(n) = a.limit {
        let keep: Vec<usize> = (0..n.min(images.rows())).collect();
        images = images.select_rows(&keep);
    }
    let n = images.rows();
    let data = Dataset::new(images, vec![0; n], model.network.spec().classes)?;
    let cfg = ExtractionConfig {
        lambda: a.lambda,
        steps: a.steps,
        step_size: a.step_size,
        frozen_samples: a.frozen_samples,
        corruptions_per_image: a.per_image,
        ..Default::default()
    };
    let artifacts = generate_corruptions(&model, &data, &cfg, a.seed)?;
    let ids: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, a.per_image)).collect();
    let mean = artifacts.iter().map(|x| x.corruption_norm()).sum::<f64>() / artifacts.len() as f64;
    eprintln!("{} corruptions, mean norm {mean:.4}", artifacts.len());
    save_artifacts(&a.out, &artifacts, &ids, a.lambda)?;
    Ok(())
}

#[derive(Args)]
pub struct ShiftArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `kind:severity`, e.g. `gaussian-noise:3`.
    #[arg(long)]
    corruption: String,
    #[arg(long, default_value_t = 7)]
    corruption_seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    report: PathBuf,
}

pub fn shift(a: ShiftArgs) -> Result<()> {
    let model = load_models(std::slice::from_ref(&a.ckpt))?.remove(0);
    let test = load_test(&a.data, a.limit)?;
    let spec = CorruptionSpec::parse(&a.corruption, a.corruption_seed)?;
    let r = shift_report(&model.network, &test, &spec)?;
    eprintln!("mean square shift {:.6}", r.mean_square_shift);
    write_report(&a.report, &r, Some(r.to_csv()))
}

#[derive(Args)]
pub struct PcaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Index of the test image.
    #[arg(long)]
    image: usize,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 30)]
    mean_samples: usize,
    #[arg(long, default_value_t = 0.99)]
    quantile: f64,
    #[arg(long, default_value_t = 7)]
    corruption_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

pub fn pca(a: PcaArgs) -> Result<()> {
    let model = load_models(std::slice::from_ref(&a.ckpt))?.remove(0);
    let test = load_test(&a.data, None)?;
    if a.image >= test.len() {
        bail!("image {} out of range, test split has {}", a.image, test.len());
    }
    let suite = corruption_suite(a.corruption_seed);
    let r = pca_overlap(
        &model,
        &test.image(a.image),
        a.image as u64,
        a.layer,
        &suite,
        a.samples,
        a.mean_samples,
        a.quantile,
        a.seed,
    )?;
    for c in &r.coverage {
        eprintln!("severity {}: {}/{} inside", c.severity, c.inside, c.total);
    }
    write_report(&a.report, &r, None)
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    #[arg(long, default_value_t = 1_000)]
    test: usize,
    #[arg(long, default_value_t = 100)]
    seed: u64,
}

pub fn synth_data(a: SynthArgs) -> Result<()> {
    save_idx_dir(&a.out, Split::Train, &synthetic_digits(a.train, a.seed)?)?;
    save_idx_dir(&a.out, Split::Test, &synthetic_digits(a.test, a.seed + 1)?)?;
    Ok(())
}
