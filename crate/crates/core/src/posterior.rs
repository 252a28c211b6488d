//! Mixture-of-Gaussians variational posterior over latent node multipliers.
//!
//! The posterior has `K` equally weighted diagonal Gaussian components over
//! every latent coordinate. Standard deviations are stored as log-std so
//! they stay positive under unconstrained updates. The prior is an
//! isotropic Gaussian centred at 1.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::log_sum_exp;
use crate::error::{Error, Result};

/// Which families of multiplicative latents a network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentStructure {
    /// Multipliers on each layer's incoming signal only.
    In,
    /// Multipliers on each layer's outgoing pre-activation only.
    Out,
    Both,
}

impl LatentStructure {
    pub fn has_incoming(self) -> bool {
        matches!(self, LatentStructure::In | LatentStructure::Both)
    }

    pub fn has_outgoing(self) -> bool {
        matches!(self, LatentStructure::Out | LatentStructure::Both)
    }
}

impl FromStr for LatentStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(LatentStructure::In),
            "out" => Ok(LatentStructure::Out),
            "both" => Ok(LatentStructure::Both),
            other => Err(Error::invalid(format!(
                "latent structure must be in, out or both; got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for LatentStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentStructure::In => "in",
            LatentStructure::Out => "out",
            LatentStructure::Both => "both",
        })
    }
}

/// A contiguous run of latent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn range(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Latent slots of one parametric layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlots {
    pub incoming: Option<Span>,
    pub outgoing: Option<Span>,
}

/// Where each layer's multipliers live in the flat latent vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    structure: LatentStructure,
    layers: Vec<LayerSlots>,
    dim: usize,
}

impl LatentLayout {
    /// `node_counts` holds `(incoming, outgoing)` node counts for each
    /// parametric layer, in order.
    pub fn new(structure: LatentStructure, node_counts: &[(usize, usize)]) -> Self {
        let mut dim = 0;
        let mut take = |n: usize| {
            let span = Span { offset: dim, len: n };
            dim += n;
            span
        };
        let layers = node_counts
            .iter()
            .map(|&(incoming, outgoing)| LayerSlots {
                incoming: structure.has_incoming().then(|| take(incoming)),
                outgoing: structure.has_outgoing().then(|| take(outgoing)),
            })
            .collect();
        LatentLayout {
            structure,
            layers,
            dim,
        }
    }

    pub fn structure(&self) -> LatentStructure {
        self.structure
    }

    pub fn layers(&self) -> &[LayerSlots] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Isotropic Gaussian prior `N(1, s^2 I)` over every latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentPrior {
    std: f64,
}

impl LatentPrior {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("prior std must be positive, got {std}")));
        }
        Ok(LatentPrior { std })
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub const MEAN: f64 = 1.0;
}

/// One draw from the posterior, with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub component: usize,
    pub values: Vec<f64>,
    /// Standard normal noise with `values = mu_k + sigma_k * noise`.
    pub noise: Vec<f64>,
}

impl LatentSample {
    /// All multipliers exactly 1.
    pub fn ones(dim: usize) -> Self {
        LatentSample {
            component: 0,
            values: vec![1.0; dim],
            noise: vec![0.0; dim],
        }
    }
}

/// Gradient (or any per-parameter quantity) shaped like the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrad {
    pub mean: Vec<Vec<f64>>,
    pub log_std: Vec<Vec<f64>>,
}

impl PosteriorGrad {
    pub fn zeros(components: usize, dim: usize) -> Self {
        PosteriorGrad {
            mean: vec![vec![0.0; dim]; components],
            log_std: vec![vec![0.0; dim]; components],
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &PosteriorGrad) {
        let pairs = self
            .mean
            .iter_mut()
            .zip(&other.mean)
            .chain(self.log_std.iter_mut().zip(&other.log_std));
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }
}

/// `q(Z) = (1/K) sum_k N(mu_k, diag(sigma_k^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoGPosterior {
    layout: LatentLayout,
    mean: Vec<Vec<f64>>,
    log_std: Vec<Vec<f64>>,
}

const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7; // 0.5 * ln(2 pi e)

impl MoGPosterior {
    /// Means at 1; each std drawn from a normal with location `std_loc` and
    /// scale `std_scale` truncated to the positive half-line.
    pub fn init<R: Rng + ?Sized>(
        layout: LatentLayout,
        components: usize,
        std_loc: f64,
        std_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::invalid("posterior needs at least one component"));
        }
        if !(std_loc > 0.0) {
            return Err(Error::invalid(format!(
                "initial std location must be positive, got {std_loc}"
            )));
        }
        if !(std_scale >= 0.0) {
            return Err(Error::invalid(format!(
                "initial std scale must be non-negative, got {std_scale}"
            )));
        }
        let dim = layout.dim();
        let mean = vec![vec![1.0; dim]; components];
        let log_std = (0..components)
            .map(|_| {
                (0..dim)
                    .map(|_| truncated_normal(std_loc, std_scale, rng).ln())
                    .collect()
            })
            .collect();
        Ok(MoGPosterior {
            layout,
            mean,
            log_std,
        })
    }

    pub fn from_parts(layout: LatentLayout, mean: Vec<Vec<f64>>, log_std: Vec<Vec<f64>>) -> Result<Self> {
        if mean.is_empty() || mean.len() != log_std.len() {
            return Err(Error::invalid("mean and log-std component counts differ"));
        }
        let dim = layout.dim();
        if mean.iter().chain(&log_std).any(|row| row.len() != dim) {
            return Err(Error::invalid(format!("component rows must have length {dim}")));
        }
        Ok(MoGPosterior {
            layout,
            mean,
            log_std,
        })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn components(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.components() as f64
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.mean[k]
    }

    pub fn log_std(&self, k: usize) -> &[f64] {
        &self.log_std[k]
    }

    pub fn std(&self, k: usize) -> Vec<f64> {
        self.log_std[k].iter().map(|r| r.exp()).collect()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.mean
    }

    pub fn log_stds(&self) -> &[Vec<f64>] {
        &self.log_std
    }

    pub fn mean_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.mean[k]
    }

    pub fn log_std_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.log_std[k]
    }

    /// Sets every standard deviation of every component.
    pub fn set_all_std(&mut self, std: f64) {
        let r = std.ln();
        for row in &mut self.log_std {
            row.fill(r);
        }
    }

    /// `params += alpha * grad`.
    pub fn step(&mut self, alpha: f64, grad: &PosteriorGrad) {
        let pairs = self
            .mean
            .iter_mut()
            .zip(&grad.mean)
            .chain(self.log_std.iter_mut().zip(&grad.log_std));
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    /// Mean of the mixture, coordinate-wise.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let w = self.weight();
        let mut out = vec![0.0; self.dim()];
        for row in &self.mean {
            for (o, m) in out.iter_mut().zip(row) {
                *o += w * m;
            }
        }
        out
    }

    /// Draws a component uniformly, then reparameterizes with fresh noise.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSample {
        let k = rng.random_range(0..self.components());
        let noise: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        self.sample_with(k, noise)
    }

    /// Deterministic reparameterized draw from component `k`.
    pub fn sample_with(&self, k: usize, noise: Vec<f64>) -> LatentSample {
        let values = self.mean[k]
            .iter()
            .zip(&self.log_std[k])
            .zip(&noise)
            .map(|((m, r), e)| m + r.exp() * e)
            .collect();
        LatentSample {
            component: k,
            values,
            noise,
        }
    }

    /// Pathwise chain rule: maps `d f / d values` of a sample to the
    /// parameters of the component that produced it.
    pub fn accumulate_pathwise(
        &self,
        sample: &LatentSample,
        d_values: &[f64],
        scale: f64,
        grad: &mut PosteriorGrad,
    ) {
        let k = sample.component;
        for i in 0..self.dim() {
            let d = scale * d_values[i];
            grad.mean[k][i] += d;
            grad.log_std[k][i] += d * self.log_std[k][i].exp() * sample.noise[i];
        }
    }

    /// Entropy of component `k`: `sum_i 0.5 ln(2 pi e sigma_i^2)`.
    pub fn component_entropy(&self, k: usize) -> f64 {
        self.log_std[k].iter().map(|r| HALF_LN_2PI_E + r).sum()
    }

    /// `(1/K) sum_k H[q_k, p]`.
    pub fn cross_entropy_to_prior(&self, prior: &LatentPrior) -> f64 {
        self.cross_entropy_with_grad(prior, None)
    }

    /// Cross-entropy to the prior; adds its gradient into `grad` scaled by
    /// `scale` when given.
    pub fn cross_entropy_with_grad(
        &self,
        prior: &LatentPrior,
        mut grad: Option<(&mut PosteriorGrad, f64)>,
    ) -> f64 {
        let s2 = prior.std * prior.std;
        let half_ln = 0.5 * (2.0 * PI * s2).ln();
        let w = self.weight();
        let mut total = 0.0;
        for k in 0..self.components() {
            for (i, (&m, &r)) in self.mean[k].iter().zip(&self.log_std[k]).enumerate() {
                let var = (2.0 * r).exp();
                let dm = m - LatentPrior::MEAN;
                total += half_ln + (var + dm * dm) / (2.0 * s2);
                if let Some((g, scale)) = grad.as_mut() {
                    g.mean[k][i] += *scale * w * dm / s2;
                    g.log_std[k][i] += *scale * w * var / s2;
                }
            }
        }
        w * total
    }

    /// Bhattacharyya coefficient between components `a` and `b`.
    pub fn bhattacharyya_coefficient(&self, a: usize, b: usize) -> f64 {
        self.ln_bhattacharyya(a, b).exp()
    }

    fn ln_bhattacharyya(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        ln_bhattacharyya_diag(&self.mean[a], &self.log_std[a], &self.mean[b], &self.log_std[b])
    }

    /// Lower bound on the mixture entropy from unary component entropies
    /// and pairwise Bhattacharyya overlaps:
    /// `(1/K) sum_k H[q_k] - (1/K) sum_k ln((1/K) sum_r BC(q_k, q_r))`.
    pub fn entropy_lower_bound(&self) -> f64 {
        self.entropy_lower_bound_with_grad(None)
    }

    pub fn entropy_lower_bound_with_grad(&self, grad: Option<(&mut PosteriorGrad, f64)>) -> f64 {
        let kk = self.components();
        let w = self.weight();
        let ln_k = (kk as f64).ln();
        let ln_bc: Vec<Vec<f64>> = (0..kk)
            .map(|a| (0..kk).map(|b| self.ln_bhattacharyya(a, b)).collect())
            .collect();
        let unary: f64 = (0..kk).map(|k| self.component_entropy(k)).sum::<f64>() * w;
        let pairwise: f64 = ln_bc.iter().map(|row| log_sum_exp(row) - ln_k).sum::<f64>() * w;
        if let Some((g, scale)) = grad {
            // softmax weights of each row's log-sum-exp
            let soft: Vec<Vec<f64>> = ln_bc
                .iter()
                .map(|row| {
                    let lse = log_sum_exp(row);
                    row.iter().map(|v| (v - lse).exp()).collect()
                })
                .collect();
            for k in 0..kk {
                for r in g.log_std[k].iter_mut() {
                    *r += scale * w;
                }
            }
            for a in 0..kk {
                for b in 0..kk {
                    if a == b {
                        continue;
                    }
                    let coeff = -scale * w * (soft[a][b] + soft[b][a]);
                    for i in 0..self.dim() {
                        let (sa2, sb2) = ((2.0 * self.log_std[a][i]).exp(), (2.0 * self.log_std[b][i]).exp());
                        let v = sa2 + sb2;
                        let d = self.mean[a][i] - self.mean[b][i];
                        // partials of ln BC(a, b) w.r.t. a's parameters
                        let dm = -d / (2.0 * v);
                        let dr = 0.5 - sa2 / v + d * d * sa2 / (2.0 * v * v);
                        g.mean[a][i] += coeff * dm;
                        g.log_std[a][i] += coeff * dr;
                    }
                }
            }
        }
        unary - pairwise
    }
}

/// `ln BC` between two diagonal Gaussians given means and log-stds.
pub fn ln_bhattacharyya_diag(mean_a: &[f64], log_std_a: &[f64], mean_b: &[f64], log_std_b: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..mean_a.len() {
        let (ra, rb) = (log_std_a[i], log_std_b[i]);
        let v = (2.0 * ra).exp() + (2.0 * rb).exp();
        let d = mean_a[i] - mean_b[i];
        total += 0.5 * (LN_2 + ra + rb) - 0.5 * v.ln() - d * d / (4.0 * v);
    }
    total
}

fn truncated_normal<R: Rng + ?Sized>(loc: f64, scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return loc;
    }
    loop {
        let e: f64 = StandardNormal.sample(rng);
        let v = loc + scale * e;
        if v > 0.0 {
            return v;
        }
    }
}
