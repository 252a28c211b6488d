//! Recovering the input corruption that mimics a latent sample.
//!
//! For a draw `Z`, gradient descent on the corrupted input `x_c` minimizes
//! `½||f_Z(x) - f̂(x_c)||² + (λ/2)||x_c - x||²`, where `f̂` averages the
//! network output over a frozen set of posterior samples.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::nll_and_error;
use crate::model::{Model, DEFAULT_PREDICTION_SAMPLES};
use crate::posterior::LatentSample;
use crate::store;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub lambda: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Posterior samples averaged into `f̂`, drawn once per extraction.
    pub frozen_samples: usize,
    pub corruptions_per_image: usize,
    /// Pixel range enforced after every step; `None` leaves inputs free.
    pub clamp: Option<(f64, f64)>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            lambda: 0.1,
            steps: 200,
            step_size: 0.01,
            frozen_samples: DEFAULT_PREDICTION_SAMPLES,
            corruptions_per_image: 8,
            clamp: Some((0.0, 1.0)),
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.steps == 0 || self.frozen_samples == 0 || self.corruptions_per_image == 0 {
            return Err(Error::invalid("steps, frozen samples and corruptions per image must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionArtifact {
    pub source: Tensor,
    pub corrupted: Tensor,
    /// `corrupted - source`.
    pub corruption: Tensor,
    pub initial_objective: f64,
    pub objective: f64,
    pub latent: LatentSample,
}

impl CorruptionArtifact {
    pub fn corruption_norm(&self) -> f64 {
        self.corruption.norm()
    }
}

/// Extracts one corruption per `(image, latent)` pair. `images` is
/// `[B, ...]` and `latents` has `B` entries; `frozen` defines `f̂`.
pub fn extract_batch(
    model: &Model,
    images: &Tensor,
    latents: &[LatentSample],
    frozen: &[LatentSample],
    cfg: &ExtractionConfig,
) -> Result<Vec<CorruptionArtifact>> {
    cfg.validate()?;
    let b = images.rows();
    if latents.len() != b {
        return Err(Error::shape(format!("{} latents for {b} images", latents.len())));
    }
    if frozen.is_empty() {
        return Err(Error::invalid("need at least one frozen sample"));
    }
    let net = &model.network;
    let layout = model.posterior.layout();
    if let Some((lo, hi)) = cfg.clamp {
        if images.data().iter().any(|v| !(lo..=hi).contains(v)) {
            return Err(Error::invalid("source images lie outside the clamp range"));
        }
    }

    // targets f_Z(x), one latent per row
    let classes = net.spec().classes;
    let mut target = Vec::with_capacity(b * classes);
    for (i, z) in latents.iter().enumerate() {
        let row = images.select_rows(&[i]);
        target.extend_from_slice(net.forward_stochastic(layout, &row, z)?.data());
    }
    let target = Tensor::new(vec![b, classes], target)?;

    let mut g = Graph::new();
    let params = net.bind_params(&mut g, false)?;
    let xc = g.input("x_c", images.clone())?;
    let x0 = g.constant(images.clone());
    let shared = if layout.structure().has_incoming() {
        None
    } else {
        net.first_affine(&mut g, &params, xc)?
    };
    let mut sum = None;
    for s in frozen {
        let lat = net.bind_latents(&mut g, layout, s, None)?;
        let out = net.build_forward(&mut g, &params, xc, Some(&lat), shared)?.logits();
        sum = Some(match sum {
            None => out,
            Some(acc) => g.add(acc, out)?,
        });
    }
    let fhat = g.scale(sum.expect("frozen samples"), 1.0 / frozen.len() as f64)?;
    let t = g.constant(target);
    let diff = g.sub(t, fhat)?;
    let sq = g.square(diff)?;
    let fit = g.sum(sq)?;
    let fit = g.scale(fit, 0.5)?;
    let gap = g.sub(xc, x0)?;
    let gsq = g.square(gap)?;
    let reg = g.sum(gsq)?;
    let reg = g.scale(reg, 0.5 * cfg.lambda)?;
    let loss = g.add(fit, reg)?;

    let width = images.row_len();
    let per_row = |g: &Graph, x: &Tensor| -> Vec<f64> {
        let d = g.value(diff);
        (0..b)
            .map(|i| {
                let f: f64 = d.row(i).iter().map(|v| v * v).sum();
                let r: f64 = x.row(i).iter().zip(images.row(i)).map(|(a, c)| (a - c) * (a - c)).sum();
                0.5 * f + 0.5 * cfg.lambda * r
            })
            .collect()
    };
    let mut current = images.clone();
    let initial = per_row(&g, &current);
    let mut best = initial.clone();
    let mut best_x = current.data().to_vec();
    let mut bindings = Bindings::new();
    for _ in 0..cfg.steps {
        let grads = g.backward(loss)?;
        let grad = grads.get(xc).expect("input gradient");
        let mut next = current.clone();
        for (v, d) in next.data_mut().iter_mut().zip(grad.data()) {
            *v -= cfg.step_size * d;
            if let Some((lo, hi)) = cfg.clamp {
                *v = v.clamp(lo, hi);
            }
        }
        bindings.insert("x_c".to_string(), next.clone());
        g.evaluate(&bindings).map_err(|e| match e {
            Error::NonFinite { .. } => Error::invalid("extraction diverged; reduce the step size"),
            other => other,
        })?;
        current = next;
        let obj = per_row(&g, &current);
        for i in 0..b {
            if obj[i] < best[i] {
                best[i] = obj[i];
                best_x[i * width..(i + 1) * width].copy_from_slice(current.row(i));
            }
        }
    }

    let shape = images.shape()[1..].to_vec();
    (0..b)
        .map(|i| {
            let source = Tensor::new(shape.clone(), images.row(i).to_vec())?;
            let corrupted = Tensor::new(shape.clone(), best_x[i * width..(i + 1) * width].to_vec())?;
            let corruption = corrupted.zip_map(&source, |a, c| a - c)?;
            if !best[i].is_finite() {
                return Err(Error::NonFinite { op: "extraction objective" });
            }
            Ok(CorruptionArtifact {
                source,
                corrupted,
                corruption,
                initial_objective: initial[i],
                objective: best[i],
                latent: latents[i].clone(),
            })
        })
        .collect()
}

/// Extracts the corruption of a single `[C, H, W]` image for latent `z`.
pub fn extract_corruption<R: Rng + ?Sized>(
    model: &Model,
    image: &Tensor,
    z: &LatentSample,
    cfg: &ExtractionConfig,
    rng: &mut R,
) -> Result<CorruptionArtifact> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.clone().reshape(shape)?;
    let frozen: Vec<_> = (0..cfg.frozen_samples).map(|_| model.posterior.sample(rng)).collect();
    let mut out = extract_batch(model, &x, std::slice::from_ref(z), &frozen, cfg)?;
    Ok(out.remove(0))
}

/// `cfg.corruptions_per_image` fresh latents per image, extracted in one
/// batch per call. Deterministic under `seed`.
pub fn generate_corruptions(model: &Model, data: &Dataset, cfg: &ExtractionConfig, seed: u64) -> Result<Vec<CorruptionArtifact>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frozen: Vec<_> = (0..cfg.frozen_samples).map(|_| model.posterior.sample(&mut rng)).collect();
    let reps = cfg.corruptions_per_image;
    let idx: Vec<usize> = (0..data.len()).flat_map(|i| std::iter::repeat_n(i, reps)).collect();
    let latents: Vec<_> = idx.iter().map(|_| model.posterior.sample(&mut rng)).collect();
    let mut out = Vec::with_capacity(idx.len());
    for (rows, lats) in idx.chunks(256).zip(latents.chunks(256)) {
        out.extend(extract_batch(model, &data.images.select_rows(rows), lats, &frozen, cfg)?);
    }
    Ok(out)
}

/// Stacks the corrupted images of a set of artifacts into a dataset,
/// labelled with the labels of their sources.
pub fn corrupted_dataset(artifacts: &[CorruptionArtifact], labels: &[usize], classes: usize) -> Result<Dataset> {
    let images: Vec<Tensor> = artifacts.iter().map(|a| a.corrupted.clone()).collect();
    Dataset::new(Tensor::stack(&images)?, labels.to_vec(), classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image: usize,
    pub lambda: f64,
    pub objective: f64,
    pub corruption_norm: f64,
    pub file: String,
}

/// Writes each artifact's source, corrupted image and corruption as raw
/// tensors plus `index.json`.
pub fn save_artifacts(dir: &Path, artifacts: &[CorruptionArtifact], image_ids: &[usize], lambda: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(artifacts.len());
    for (i, (a, &id)) in artifacts.iter().zip(image_ids).enumerate() {
        let file = format!("artifact-{i:05}.f64");
        let stacked = Tensor::stack(&[a.source.clone(), a.corrupted.clone(), a.corruption.clone()])?;
        store::write_tensor(&dir.join(&file), &stacked)?;
        index.push(IndexEntry {
            image: id,
            lambda,
            objective: a.objective,
            corruption_norm: a.corruption_norm(),
            file,
        });
    }
    #[derive(Serialize)]
    struct Index<'a> {
        image_shape: &'a [usize],
        layout: &'static str,
        entries: Vec<IndexEntry>,
    }
    let image_shape = artifacts.first().map_or(&[][..], |a| a.source.shape());
    let idx = Index {
        image_shape,
        layout: "source, corrupted, corruption",
        entries: index,
    };
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&idx)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTestEntry {
    pub generator: usize,
    pub evaluator: usize,
    pub lambda: f64,
    pub nll: f64,
    pub mean_corruption_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTestReport {
    /// Clean NLL of each evaluator on the source images.
    pub clean_nll: Vec<f64>,
    pub entries: Vec<CrossTestEntry>,
}

impl CrossTestReport {
    pub fn nll(&self, generator: usize, evaluator: usize, lambda: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.generator == generator && e.evaluator == evaluator && e.lambda == lambda)
            .map(|e| e.nll)
    }

    /// Corrupted minus clean NLL of `evaluator`.
    pub fn degradation(&self, generator: usize, evaluator: usize, lambda: f64) -> Option<f64> {
        self.nll(generator, evaluator, lambda).map(|v| v - self.clean_nll[evaluator])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("generator,evaluator,lambda,nll,clean_nll,mean_corruption_norm\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.generator, e.evaluator, e.lambda, e.nll, self.clean_nll[e.evaluator], e.mean_corruption_norm
            ));
        }
        out
    }
}

/// Every model generates corruptions on `data` for each λ; every model's
/// predictive NLL is then measured on every generator's corruptions.
pub fn self_and_cross_test(
    models: &[&Model],
    data: &Dataset,
    lambdas: &[f64],
    cfg: &ExtractionConfig,
    eval_samples: usize,
    seed: u64,
) -> Result<CrossTestReport> {
    if models.is_empty() || data.is_empty() {
        return Err(Error::invalid("cross test needs models and images"));
    }
    let shape = models[0].network.spec();
    if models.iter().any(|m| m.network.spec().input_shape != shape.input_shape || m.network.spec().classes != shape.classes) {
        return Err(Error::shape("models disagree on input or output shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let mut clean_nll = Vec::with_capacity(models.len());
    for m in models {
        let p = m.predictive_mean(&data.images, eval_samples, &mut rng)?;
        clean_nll.push(nll_and_error(&p, &data.labels)?.0);
    }
    let labels: Vec<usize> = data
        .labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, cfg.corruptions_per_image))
        .collect();
    let mut entries = Vec::new();
    for (gi, gen) in models.iter().enumerate() {
        for &lambda in lambdas {
            let c = ExtractionConfig { lambda, ..cfg.clone() };
            let artifacts = generate_corruptions(gen, data, &c, seed.wrapping_add(gi as u64))?;
            let norm = artifacts.iter().map(|a| a.corruption_norm()).sum::<f64>() / artifacts.len() as f64;
            let corrupted = corrupted_dataset(&artifacts, &labels, data.classes)?;
            for (ei, ev) in models.iter().enumerate() {
                let p = ev.predictive_mean(&corrupted.images, eval_samples, &mut rng)?;
                entries.push(CrossTestEntry {
                    generator: gi,
                    evaluator: ei,
                    lambda,
                    nll: nll_and_error(&p, &corrupted.labels)?.0,
                    mean_corruption_norm: norm,
                });
            }
        }
    }
    Ok(CrossTestReport { clean_nll, entries })
}
