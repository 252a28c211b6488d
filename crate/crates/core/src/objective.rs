//! The γ-weighted evidence lower bound and the SGD training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::RngState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{LayerParams, Model, Network};
use crate::posterior::{LatentPrior, LatentSample, MoGPosterior, PosteriorGrad};
use crate::tensor::Tensor;

/// Observation model `p(y | f(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Likelihood {
    /// Softmax over the logits.
    Categorical,
    /// `y ~ N(f(x), noise_std²)` per output coordinate.
    Gaussian { noise_std: f64 },
}

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a Tensor,
    pub targets: Targets<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaElboConfig {
    pub gamma: f64,
    /// Monte Carlo samples of the expected log-likelihood per step.
    pub samples: usize,
    /// Per-datapoint weight decay on θ. The full-data log prior is
    /// `-(dataset_size * weight_decay / 2) ||θ||²`.
    pub weight_decay: f64,
    pub dataset_size: usize,
    pub likelihood: Likelihood,
}

impl GammaElboConfig {
    pub fn new(gamma: f64, dataset_size: usize) -> Self {
        GammaElboConfig {
            gamma,
            samples: 4,
            weight_decay: 5e-4,
            dataset_size,
            likelihood: Likelihood::Categorical,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.samples == 0 {
            return Err(Error::invalid("need at least one training sample"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        if self.dataset_size == 0 {
            return Err(Error::invalid("dataset size must be positive"));
        }
        if let Likelihood::Gaussian { noise_std } = self.likelihood {
            if !(noise_std > 0.0) {
                return Err(Error::invalid("gaussian noise std must be positive"));
            }
        }
        Ok(())
    }
}

/// The terms of one objective evaluation, all at full-dataset scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `(N/B)(1/S) Σ_s log p(batch | θ, Z_s)`.
    pub expected_log_likelihood: f64,
    pub log_weight_prior: f64,
    /// `H[q, p]`.
    pub cross_entropy: f64,
    /// Lower bound `Ĥ[q]` on the posterior entropy.
    pub entropy: f64,
    pub beta: f64,
    pub gamma: f64,
    pub objective: f64,
}

impl ElboTerms {
    /// Objective rebuilt from the individual terms.
    pub fn recombine(&self) -> f64 {
        self.expected_log_likelihood
            + self.log_weight_prior
            + self.beta * (-self.cross_entropy + (self.gamma + 1.0) * self.entropy)
    }
}

/// Gradient of the objective with respect to θ and φ.
#[derive(Debug, Clone)]
pub struct ElboGrad {
    pub theta: Vec<Option<LayerParams>>,
    pub posterior: PosteriorGrad,
}

/// Draws `cfg.samples` latents and evaluates the objective with gradients.
#[allow(clippy::too_many_arguments)]
pub fn gamma_elbo<R: Rng + ?Sized>(
    net: &Network,
    posterior: &MoGPosterior,
    prior: &LatentPrior,
    batch: Batch<'_>,
    cfg: &GammaElboConfig,
    beta: f64,
    rng: &mut R,
) -> Result<(ElboTerms, ElboGrad)> {
    let samples: Vec<LatentSample> = (0..cfg.samples).map(|_| posterior.sample(rng)).collect();
    gamma_elbo_with(net, posterior, prior, batch, cfg, beta, &samples)
}

/// Objective and gradients for fixed latent draws (frozen noise).
pub fn gamma_elbo_with(
    net: &Network,
    posterior: &MoGPosterior,
    prior: &LatentPrior,
    batch: Batch<'_>,
    cfg: &GammaElboConfig,
    beta: f64,
    samples: &[LatentSample],
) -> Result<(ElboTerms, ElboGrad)> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if samples.is_empty() {
        return Err(Error::invalid("need at least one latent sample"));
    }
    let layout = posterior.layout();
    let b = batch.inputs.rows();
    let n = cfg.dataset_size as f64;
    let scale = n / b as f64 / samples.len() as f64;

    let mut g = Graph::new();
    let params = net.bind_params(&mut g, true)?;
    let x = g.constant(batch.inputs.clone());
    let target = match (cfg.likelihood, batch.targets) {
        (Likelihood::Categorical, Targets::Classes(y)) => {
            if y.len() != b {
                return Err(Error::shape(format!("{} labels for {b} inputs", y.len())));
            }
            g.constant(Tensor::vector(y.iter().map(|&c| c as f64).collect()))
        }
        (Likelihood::Gaussian { .. }, Targets::Values(y)) => g.constant(y.clone()),
        _ => return Err(Error::invalid("targets do not match the likelihood")),
    };
    let shared = if layout.structure().has_incoming() {
        None
    } else {
        net.first_affine(&mut g, &params, x)?
    };

    let mut per_sample = Vec::with_capacity(samples.len());
    let mut total: Option<NodeId> = None;
    for (i, sample) in samples.iter().enumerate() {
        let lat = net.bind_latents(&mut g, layout, sample, Some(&format!("z{i}")))?;
        let fwd = net.build_forward(&mut g, &params, x, Some(&lat), shared)?;
        let logits = fwd.logits();
        let loglik = match cfg.likelihood {
            Likelihood::Categorical => {
                let ce = g.softmax_cross_entropy(logits, target)?;
                let s = g.sum(ce)?;
                g.scale(s, -1.0)?
            }
            Likelihood::Gaussian { noise_std } => {
                let d = g.sub(logits, target)?;
                let sq = g.square(d)?;
                let s = g.sum(sq)?;
                g.scale(s, -0.5 / (noise_std * noise_std))?
            }
        };
        total = Some(match total {
            None => loglik,
            Some(t) => g.add(t, loglik)?,
        });
        per_sample.push(lat);
    }
    let ll_node = g.scale(total.expect("at least one sample"), scale)?;
    let mut ell = g.value(ll_node).item()?;
    if let Likelihood::Gaussian { noise_std } = cfg.likelihood {
        let outputs = g.value(target).len() as f64;
        ell -= scale * samples.len() as f64 * outputs * 0.5 * (2.0 * std::f64::consts::PI * noise_std * noise_std).ln();
    }
    if !ell.is_finite() {
        return Err(Error::NonFinite { op: "log-likelihood" });
    }

    let grads = g.backward(ll_node)?;
    let mut theta = net.param_grads(&params, &grads);
    let prior_scale = n * cfg.weight_decay;
    for (gp, p) in theta.iter_mut().zip(net.params()) {
        if let (Some(gp), Some(p)) = (gp.as_mut(), p) {
            gp.weight.axpy(-prior_scale, &p.weight)?;
            gp.bias.axpy(-prior_scale, &p.bias)?;
        }
    }
    let log_weight_prior = -0.5 * prior_scale * net.squared_norm();

    let mut phi = PosteriorGrad::zeros(posterior.components(), posterior.dim());
    for (sample, lat) in samples.iter().zip(&per_sample) {
        let dz = lat.gather_grad(&grads, layout);
        posterior.accumulate_pathwise(sample, &dz, 1.0, &mut phi);
    }
    let cross_entropy = posterior.cross_entropy_with_grad(prior, Some((&mut phi, -beta)));
    let entropy = posterior.entropy_lower_bound_with_grad(Some((&mut phi, beta * (cfg.gamma + 1.0))));

    let mut terms = ElboTerms {
        expected_log_likelihood: ell,
        log_weight_prior,
        cross_entropy,
        entropy,
        beta,
        gamma: cfg.gamma,
        objective: 0.0,
    };
    terms.objective = terms.recombine();
    if !terms.objective.is_finite() {
        return Err(Error::NonFinite { op: "objective" });
    }
    Ok((
        terms,
        ElboGrad {
            theta,
            posterior: phi,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of θ.
    pub lr_theta: f64,
    /// Constant learning rate of the posterior parameters.
    pub lr_phi: f64,
    pub momentum: f64,
    /// β reaches 1 at `floor(anneal_fraction * epochs)`.
    pub anneal_fraction: f64,
    /// θ's learning rate decays linearly between these fractions of the
    /// run down to `lr_theta * lr_decay_factor`.
    pub lr_decay_start: f64,
    pub lr_decay_end: f64,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Posterior samples for per-epoch validation metrics.
    pub validation_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            lr_theta: 0.05,
            lr_phi: 0.05,
            momentum: 0.9,
            anneal_fraction: 2.0 / 3.0,
            lr_decay_start: 0.5,
            lr_decay_end: 0.9,
            lr_decay_factor: 0.01,
            seed: 0,
            validation_samples: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.anneal_fraction > 0.0 && self.anneal_fraction <= 1.0) {
            return Err(Error::invalid("anneal fraction must lie in (0, 1]"));
        }
        if !(self.lr_theta > 0.0 && self.lr_phi > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(0.0 <= self.lr_decay_start && self.lr_decay_start <= self.lr_decay_end && self.lr_decay_end <= 1.0) {
            return Err(Error::invalid("decay window must satisfy 0 <= start <= end <= 1"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::invalid("decay factor must be positive"));
        }
        Ok(())
    }
}

/// Linear ramp from 0 at epoch 0 to 1 at `floor(anneal_fraction * epochs)`.
pub fn beta_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let ramp = (cfg.anneal_fraction * cfg.epochs as f64).floor() as usize;
    if ramp == 0 || epoch >= ramp {
        1.0
    } else {
        epoch as f64 / ramp as f64
    }
}

/// θ learning rate for an epoch under the linear decay window.
pub fn lr_theta_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let start = cfg.lr_decay_start * cfg.epochs as f64;
    let end = cfg.lr_decay_end * cfg.epochs as f64;
    let e = epoch as f64;
    let frac = if e <= start {
        0.0
    } else if e >= end || end <= start {
        1.0
    } else {
        (e - start) / (end - start)
    };
    cfg.lr_theta * (1.0 - frac * (1.0 - cfg.lr_decay_factor))
}

/// Per-epoch averages of the objective terms, divided by the dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub lr_theta: f64,
    pub expected_log_likelihood: f64,
    pub cross_entropy: f64,
    pub objective: f64,
    /// `Ĥ[q]` at the end of the epoch.
    pub entropy: f64,
    pub val_nll: Option<f64>,
    pub val_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// `Ĥ[q]` before the first step.
    pub initial_entropy: f64,
    pub epochs: Vec<EpochRecord>,
    /// Trainer stream after the last epoch.
    #[serde(default)]
    pub rng: Option<RngState>,
}

/// Trains `model` in place by stochastic ascent on the objective divided by
/// the dataset size. `on_epoch` runs after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut Model,
    prior: &LatentPrior,
    data: &Dataset,
    cfg: &TrainConfig,
    obj: &GammaElboConfig,
    validation: Option<&Dataset>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    obj.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if obj.likelihood != Likelihood::Categorical {
        return Err(Error::invalid("training on a dataset needs the categorical likelihood"));
    }
    let obj = GammaElboConfig {
        dataset_size: data.len(),
        ..obj.clone()
    };
    let n = data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Option<LayerParams>> = model
        .network
        .params()
        .iter()
        .map(|p| {
            p.as_ref().map(|p| LayerParams {
                weight: Tensor::zeros(p.weight.shape()),
                bias: Tensor::zeros(p.bias.shape()),
            })
        })
        .collect();
    let mut history = TrainHistory {
        initial_entropy: model.posterior.entropy_lower_bound(),
        epochs: Vec::with_capacity(cfg.epochs),
        rng: None,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let beta = beta_at_epoch(epoch, cfg);
        let lr = lr_theta_at_epoch(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut ell, mut ce, mut total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(idx);
            let batch = Batch {
                inputs: &x,
                targets: Targets::Classes(&y),
            };
            let (terms, grad) = gamma_elbo(&model.network, &model.posterior, prior, batch, &obj, beta, &mut rng)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { epoch },
                    other => other,
                })?;
            for ((p, v), gp) in model.network.params_mut().iter_mut().zip(&mut velocity).zip(&grad.theta) {
                if let (Some(p), Some(v), Some(gp)) = (p.as_mut(), v.as_mut(), gp) {
                    for (pt, vt, gt) in [(&mut p.weight, &mut v.weight, &gp.weight), (&mut p.bias, &mut v.bias, &gp.bias)] {
                        for ((pv, vv), gv) in pt.data_mut().iter_mut().zip(vt.data_mut()).zip(gt.data()) {
                            *vv = cfg.momentum * *vv + gv / n;
                            *pv += lr * *vv;
                        }
                    }
                }
            }
            model.posterior.step(cfg.lr_phi / n, &grad.posterior);
            ell += terms.expected_log_likelihood / n;
            ce += terms.cross_entropy / n;
            total += terms.objective / n;
            steps += 1;
        }
        let entropy = model.posterior.entropy_lower_bound();
        if !entropy.is_finite() || !total.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let (val_nll, val_error) = match validation {
            Some(v) if cfg.validation_samples > 0 => {
                let p = model.predictive_mean(&v.images, cfg.validation_samples, &mut rng)?;
                let (nll, err) = metrics::nll_and_error(&p, &v.labels)?;
                (Some(nll), Some(err))
            }
            _ => (None, None),
        };
        let s = steps as f64;
        let record = EpochRecord {
            epoch,
            beta,
            lr_theta: lr,
            expected_log_likelihood: ell / s,
            cross_entropy: ce / s,
            objective: total / s,
            entropy,
            val_nll,
            val_error,
        };
        history.epochs.push(record);
        on_epoch(&record, model)?;
    }
    history.rng = Some(RngState::capture(&rng));
    Ok(history)
}
