//! γ sweeps and the label-noise protocol.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{inject_label_noise, CorruptionSpec, Dataset};
use crate::error::Result;
use crate::metrics::nll_and_error;
use crate::model::{Model, Network};
use crate::objective::{fit, EpochRecord, TrainHistory};
use crate::posterior::MoGPosterior;
use crate::report::{evaluate, EvalReport};

/// Builds a freshly initialized model for `cfg` from `seed`.
pub fn init_model(cfg: &RunConfig, input_shape: Vec<usize>, seed: u64) -> Result<Model> {
    let spec = cfg.network_spec(input_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::init(spec.clone(), &mut rng)?;
    let layout = spec.latent_layout(cfg.structure);
    let q = MoGPosterior::init(layout, cfg.components, cfg.init_std, cfg.init_std_scale, &mut rng)?;
    Model::new(net, q)
}

/// Trains one model with `gamma` and `seed` overriding the config.
pub fn train_run(
    cfg: &RunConfig,
    gamma: f64,
    seed: u64,
    train: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<(Model, TrainHistory)> {
    let mut model = init_model(cfg, train.image_shape().to_vec(), seed)?;
    let tc = crate::objective::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let obj = crate::objective::GammaElboConfig {
        gamma,
        ..cfg.objective(train.len())
    };
    let history = fit(&mut model, &cfg.prior()?, train, &tc, &obj, None, on_epoch)?;
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub gamma: f64,
    pub seed: u64,
    pub history: TrainHistory,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    pub gamma: f64,
    pub clean_nll: f64,
    pub clean_nll_std: f64,
    pub corrupted_nll: f64,
    pub corrupted_nll_std: f64,
    pub clean_error: f64,
    pub corrupted_error: f64,
    pub corrupted_ece: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepReport {
    pub fn gammas(&self) -> Vec<f64> {
        let mut g: Vec<f64> = self.runs.iter().map(|r| r.gamma).collect();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }

    pub fn summary(&self) -> Vec<GammaSummary> {
        self.gammas()
            .into_iter()
            .map(|gamma| {
                let runs: Vec<&SweepRun> = self.runs.iter().filter(|r| r.gamma == gamma).collect();
                let col = |f: &dyn Fn(&EvalReport) -> f64| runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
                let (clean_nll, clean_nll_std) = mean_std(&col(&|r| r.clean.nll));
                let (corrupted_nll, corrupted_nll_std) = mean_std(&col(&|r| r.corrupted_nll()));
                let avg_ece = |r: &EvalReport| r.rows.iter().map(|m| m.ece).sum::<f64>() / r.rows.len().max(1) as f64;
                GammaSummary {
                    gamma,
                    clean_nll,
                    clean_nll_std,
                    corrupted_nll,
                    corrupted_nll_std,
                    clean_error: mean_std(&col(&|r| r.clean.error)).0,
                    corrupted_error: mean_std(&col(&|r| r.corrupted_error())).0,
                    corrupted_ece: mean_std(&col(&avg_ece)).0,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "gamma,clean_nll,clean_nll_std,corrupted_nll,corrupted_nll_std,clean_error,corrupted_error,corrupted_ece\n",
        );
        for s in self.summary() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.gamma, s.clean_nll, s.clean_nll_std, s.corrupted_nll, s.corrupted_nll_std, s.clean_error, s.corrupted_error, s.corrupted_ece
            ));
        }
        out
    }
}

/// Trains every `(gamma, seed)` pair and evaluates it on `test` under
/// `suite`. `on_run` sees each trained model before it is dropped.
pub fn sweep(
    cfg: &RunConfig,
    gammas: &[f64],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    suite: &[CorruptionSpec],
    on_run: &mut dyn FnMut(&SweepRun, &Model) -> Result<()>,
) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    for &seed in seeds {
        for &gamma in gammas {
            let (model, history) = train_run(cfg, gamma, seed, train, &mut |_, _| Ok(()))?;
            let eval = evaluate(std::slice::from_ref(&model), test, suite, cfg.eval_samples, seed, gamma)?;
            let run = SweepRun {
                gamma,
                seed,
                history,
                report: eval,
            };
            on_run(&run, &model)?;
            report.runs.push(run);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyEpoch {
    pub epoch: usize,
    /// NLL on samples whose labels were kept.
    pub clean_nll: f64,
    /// NLL on the relabelled samples, measured against their wrong labels.
    pub noisy_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyRun {
    pub gamma: f64,
    pub seed: u64,
    pub epochs: Vec<NoisyEpoch>,
    pub test_nll: f64,
    pub test_error: f64,
}

impl NoisyRun {
    /// `NLL(D2) - NLL(D1)` after the last epoch.
    pub fn final_gap(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.noisy_nll - e.clean_nll)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoisyLabelReport {
    pub fraction: f64,
    pub runs: Vec<NoisyRun>,
}

impl NoisyLabelReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,seed,epoch,clean_nll,noisy_nll\n");
        for r in &self.runs {
            for e in &r.epochs {
                out.push_str(&format!("{},{},{},{},{}\n", r.gamma, r.seed, e.epoch, e.clean_nll, e.noisy_nll));
            }
        }
        out
    }
}

/// Relabels `fraction` of the training set, trains at each γ and tracks the
/// NLL of both subsets after every epoch.
pub fn noisy_labels(
    cfg: &RunConfig,
    fraction: f64,
    gammas: &[f64],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
) -> Result<NoisyLabelReport> {
    let mut report = NoisyLabelReport {
        fraction,
        runs: Vec::new(),
    };
    for &seed in seeds {
        let split = inject_label_noise(train, fraction, seed)?;
        let (d1, d2) = (split.clean_subset(), split.noisy_subset());
        for &gamma in gammas {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut epochs = Vec::new();
            let samples = cfg.eval_samples;
            let mut track = |r: &EpochRecord, m: &Model| -> Result<()> {
                let nll = |d: &Dataset, rng: &mut ChaCha8Rng| -> Result<f64> {
                    if d.is_empty() {
                        return Ok(0.0);
                    }
                    Ok(nll_and_error(&m.predictive_mean(&d.images, samples, rng)?, &d.labels)?.0)
                };
                epochs.push(NoisyEpoch {
                    epoch: r.epoch,
                    clean_nll: nll(&d1, &mut rng)?,
                    noisy_nll: nll(&d2, &mut rng)?,
                });
                Ok(())
            };
            let (model, _) = train_run(cfg, gamma, seed, &split.dataset, &mut track)?;
            let p = model.predictive_mean(&test.images, samples, &mut rng)?;
            let (test_nll, test_error) = nll_and_error(&p, &test.labels)?;
            report.runs.push(NoisyRun {
                gamma,
                seed,
                epochs,
                test_nll,
                test_error,
            });
        }
    }
    Ok(report)
}
