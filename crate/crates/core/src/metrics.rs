//! Predictive metrics, ensembling and PCA of output samples.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_corruption, CorruptionSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_probabilities(probs: &Tensor, labels: &[usize]) -> Result<usize> {
    let &[n, classes] = probs.shape() else {
        return Err(Error::shape(format!("probabilities must be N x classes, got {:?}", probs.shape())));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::shape(format!("label {y} outside 0..{classes}")));
    }
    for (i, row) in probs.data().chunks_exact(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(classes)
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of the labels and top-1 error rate.
pub fn nll_and_error(probs: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let classes = check_probabilities(probs, labels)?;
    let n = labels.len() as f64;
    let rows = probs.data().chunks_exact(classes).zip(labels);
    let nll = compensated_sum(rows.clone().map(|(row, &y)| -row[y].max(f64::MIN_POSITIVE).ln())) / n;
    let wrong = rows.filter(|(row, &y)| argmax(row) != y).count();
    Ok((nll, wrong as f64 / n))
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    let classes = check_probabilities(probs, labels)?;
    let n = labels.len() as f64;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (row, &y) in probs.data().chunks_exact(classes).zip(labels) {
        let k = argmax(row);
        let c = row[k];
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if k == y {
            correct[b] += 1.0;
        }
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let m = count[b] as f64;
            total += (m / n) * (correct[b] / m - conf[b] / m).abs();
        }
    }
    Ok(total)
}

/// Uniform average of each member's predictive mean.
pub fn ensemble_predict<R: Rng + ?Sized>(models: &[Model], x: &Tensor, samples: usize, rng: &mut R) -> Result<Tensor> {
    let first = models.first().ok_or_else(|| Error::invalid("empty ensemble"))?;
    let mut acc = first.predictive_mean(x, samples, rng)?;
    for m in &models[1..] {
        let p = m.predictive_mean(x, samples, rng)?;
        acc.axpy(1.0, &p)?;
    }
    let inv = 1.0 / models.len() as f64;
    Ok(acc.map(|v| v * inv))
}

/// Principal component projection of a set of vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k x d`, one unit-norm component per row.
    pub components: Tensor,
    /// Eigenvalue over trace for each kept component.
    pub explained_variance_ratio: Vec<f64>,
    /// `M x k`.
    pub projections: Tensor,
}

/// Projects the rows of `vectors` (`M x d`) onto the top `k` principal
/// axes. Each component is signed so that its largest-magnitude
/// coordinate is positive.
pub fn pca_project(vectors: &Tensor, k: usize) -> Result<Pca> {
    let &[m, d] = vectors.shape() else {
        return Err(Error::shape(format!("PCA needs an M x d matrix, got {:?}", vectors.shape())));
    };
    if m < 2 {
        return Err(Error::invalid("PCA needs at least two vectors"));
    }
    if k == 0 || k > m.min(d) {
        return Err(Error::invalid(format!("cannot keep {k} components of {m} x {d} data")));
    }
    let mut mean = vec![0.0; d];
    for row in vectors.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centered = DMatrix::from_fn(m, d, |i, j| vectors.data()[i * d + j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace: f64 = eig.eigenvalues.iter().sum();
    let mut components = Vec::with_capacity(k * d);
    let mut ratios = Vec::with_capacity(k);
    for &idx in &order[..k] {
        let col = eig.eigenvectors.column(idx);
        let big = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap();
        let sign = if col[big] < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| sign * v));
        let ratio = if trace > 0.0 { eig.eigenvalues[idx].max(0.0) / trace } else { 0.0 };
        ratios.push(ratio);
    }
    let mut proj = Vec::with_capacity(m * k);
    for i in 0..m {
        for c in 0..k {
            let comp = &components[c * d..(c + 1) * d];
            proj.push((0..d).map(|j| centered[(i, j)] * comp[j]).sum());
        }
    }
    Ok(Pca {
        mean,
        components: Tensor::new(vec![k, d], components)?,
        explained_variance_ratio: ratios,
        projections: Tensor::new(vec![m, k], proj)?,
    })
}

impl Pca {
    /// Projects new vectors with the fitted mean and components.
    pub fn transform(&self, vectors: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        let k = self.components.rows();
        if vectors.rank() != 2 || vectors.shape()[1] != d {
            return Err(Error::shape(format!("expected rows of length {d}, got {:?}", vectors.shape())));
        }
        let mut out = Vec::with_capacity(vectors.rows() * k);
        for row in vectors.data().chunks_exact(d) {
            for c in 0..k {
                out.push(self.components.row(c).iter().zip(row).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum());
            }
        }
        Tensor::new(vec![vectors.rows(), k], out)
    }
}

/// Fraction of `points` inside the ellipse containing `quantile` of
/// `samples` under the samples' Mahalanobis distance (both `* x 2`).
pub fn ellipse_coverage(samples: &Tensor, points: &Tensor, quantile: f64) -> Result<f64> {
    for t in [samples, points] {
        if t.rank() != 2 || t.shape()[1] != 2 {
            return Err(Error::shape(format!("expected 2-D points, got {:?}", t.shape())));
        }
    }
    let m = samples.rows();
    if m < 3 {
        return Err(Error::invalid("need at least three samples for an ellipse"));
    }
    let mut mean = [0.0; 2];
    for r in samples.data().chunks_exact(2) {
        mean[0] += r[0] / m as f64;
        mean[1] += r[1] / m as f64;
    }
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for r in samples.data().chunks_exact(2) {
        let (dx, dy) = (r[0] - mean[0], r[1] - mean[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let s = (m - 1) as f64;
    let (sxx, sxy, syy) = (sxx / s, sxy / s, syy / s);
    let det = sxx * syy - sxy * sxy;
    if !(det > 0.0) {
        return Err(Error::invalid("sample covariance is singular"));
    }
    let dist = |r: &[f64]| {
        let (dx, dy) = (r[0] - mean[0], r[1] - mean[1]);
        (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det
    };
    let mut d: Vec<f64> = samples.data().chunks_exact(2).map(dist).collect();
    d.sort_by(f64::total_cmp);
    let rank = ((quantile * m as f64).ceil() as usize).clamp(1, m);
    let threshold = d[rank - 1];
    let inside = points.data().chunks_exact(2).filter(|r| dist(r) <= threshold).count();
    Ok(inside as f64 / points.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedPoint {
    pub corruption: CorruptionSpec,
    pub projection: [f64; 2],
    pub inside: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityCoverage {
    pub severity: u8,
    pub inside: usize,
    pub total: usize,
}

/// Layer outputs of one image under the posterior, projected to 2-D, with
/// the expected outputs of its corrupted versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaOverlap {
    pub layer: usize,
    pub quantile: f64,
    pub explained_variance_ratio: Vec<f64>,
    /// `samples x 2` projections of posterior draws.
    pub samples: Tensor,
    /// Projection of the expected output on the clean image.
    pub expected: [f64; 2],
    pub corrupted: Vec<CorruptedPoint>,
    pub coverage: Vec<SeverityCoverage>,
}

/// Fits PCA on `samples` posterior draws of layer `layer` for `image`
/// (`[C, H, W]`) and reports which corrupted expected outputs, each averaged
/// over `mean_samples` draws, fall inside the `quantile` ellipse.
#[allow(clippy::too_many_arguments)]
pub fn pca_overlap(
    model: &Model,
    image: &Tensor,
    index: u64,
    layer: usize,
    suite: &[CorruptionSpec],
    samples: usize,
    mean_samples: usize,
    quantile: f64,
    seed: u64,
) -> Result<PcaOverlap> {
    if samples < 3 || mean_samples == 0 {
        return Err(Error::invalid("need at least three posterior samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = model.posterior.layout();
    let mut batch = vec![1];
    batch.extend_from_slice(image.shape());
    let x = image.clone().reshape(batch)?;
    let mut rows = Vec::new();
    for _ in 0..samples {
        let z = model.posterior.sample(&mut rng);
        rows.push(model.network.layer_output(&x, layer, Some((layout, &z)))?.into_data());
    }
    let d = rows[0].len();
    if d < 2 {
        return Err(Error::invalid("layer output must have at least two units"));
    }
    let pca = pca_project(&Tensor::new(vec![samples, d], rows.concat())?, 2)?;

    let mut inputs = vec![image.clone()];
    for spec in suite {
        inputs.push(apply_corruption(image, spec, index)?);
    }
    let stacked = Tensor::stack(&inputs)?;
    let mut mean = Tensor::zeros(&[inputs.len(), d]);
    for _ in 0..mean_samples {
        let z = model.posterior.sample(&mut rng);
        let out = model.network.layer_output(&stacked, layer, Some((layout, &z)))?;
        for (m, v) in mean.data_mut().iter_mut().zip(out.data()) {
            *m += v / mean_samples as f64;
        }
    }
    let proj = pca.transform(&mean)?;
    let point = |i: usize| [proj.row(i)[0], proj.row(i)[1]];
    let mut corrupted = Vec::with_capacity(suite.len());
    for (i, spec) in suite.iter().enumerate() {
        let p = point(i + 1);
        let inside = ellipse_coverage(&pca.projections, &Tensor::matrix(1, 2, p.to_vec())?, quantile)? == 1.0;
        corrupted.push(CorruptedPoint { corruption: *spec, projection: p, inside });
    }
    let mut coverage: Vec<SeverityCoverage> = Vec::new();
    for c in &corrupted {
        let sev = c.corruption.severity;
        let entry = match coverage.iter_mut().find(|e| e.severity == sev) {
            Some(e) => e,
            None => {
                coverage.push(SeverityCoverage { severity: sev, inside: 0, total: 0 });
                coverage.last_mut().unwrap()
            }
        };
        entry.total += 1;
        entry.inside += c.inside as usize;
    }
    coverage.sort_by_key(|e| e.severity);
    Ok(PcaOverlap {
        layer,
        quantile,
        explained_variance_ratio: pca.explained_variance_ratio,
        samples: pca.projections,
        expected: point(0),
        corrupted,
        coverage,
    })
}
