// Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use nodebnn::autodiff::{grad_check, relative_error, Bindings, Graph, NodeId, Padding};
use nodebnn::model::LayerParams;
use nodebnn::objective::{gamma_elbo, gamma_elbo_with, Batch, GammaElboConfig, Likelihood, Targets};
use nodebnn::{Activation, LatentLayout, LatentPrior, LatentSample, LatentStructure, MoGPosterior, Network, NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by at least `gap`, either sign.
pub fn away_from_zero(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(gap..1.5);
            if r.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub const FD_EPS: f64 = 1e-6;

/// Reduces `y` to a scalar through a fixed random projection so every
/// output coordinate contributes a distinct weight.
fn project(g: &mut Graph, y: NodeId, r: &mut ChaCha8Rng) -> NodeId {
    let w = uniform(g.shape(y), -1.0, 1.0, r);
    let w = g.constant(w);
    let m = g.mul(y, w).unwrap();
    g.sum(m).unwrap()
}

fn check(g: &mut Graph, seed: NodeId, inputs: &[(&str, NodeId)]) -> f64 {
    let point: Bindings = inputs.iter().map(|(n, id)| (n.to_string(), g.value(*id).clone())).collect();
    grad_check(g, seed, &point, FD_EPS)
}

type Case = fn(&mut ChaCha8Rng) -> f64;

fn unary_case(r: &mut ChaCha8Rng, x: Tensor, op: fn(&mut Graph, NodeId) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let a = g.input("a", x).unwrap();
    let y = op(&mut g, a);
    let s = project(&mut g, y, r);
    check(&mut g, s, &[("a", a)])
}

fn binary_case(r: &mut ChaCha8Rng, op: fn(&mut Graph, NodeId, NodeId) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let a = g.input("a", uniform(&[3, 4], -1.0, 1.0, r)).unwrap();
    let b = g.input("b", uniform(&[3, 4], -1.0, 1.0, r)).unwrap();
    let y = op(&mut g, a, b);
    let s = project(&mut g, y, r);
    check(&mut g, s, &[("a", a), ("b", b)])
}

/// Every primitive kind with a gradient check builder. Each call draws a
/// fresh random point from the supplied stream.
pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r| binary_case(r, |g, a, b| g.add(a, b).unwrap())),
        ("sub", |r| binary_case(r, |g, a, b| g.sub(a, b).unwrap())),
        ("mul", |r| binary_case(r, |g, a, b| g.mul(a, b).unwrap())),
        ("scale", |r| {
            let x = uniform(&[5], -1.0, 1.0, r);
            unary_case(r, x, |g, a| g.scale(a, -2.7).unwrap())
        }),
        ("matmul", |r| {
            let mut g = Graph::new();
            let a = g.input("a", uniform(&[3, 5], -1.0, 1.0, r)).unwrap();
            let b = g.input("b", uniform(&[5, 2], -1.0, 1.0, r)).unwrap();
            let y = g.matmul(a, b).unwrap();
            let s = project(&mut g, y, r);
            check(&mut g, s, &[("a", a), ("b", b)])
        }),
        ("conv2d-same", |r| conv_case(r, 1, Padding::Same)),
        ("conv2d-stride2", |r| conv_case(r, 2, Padding::Same)),
        ("conv2d-valid", |r| conv_case(r, 2, Padding::Valid)),
        ("global-avg-pool", |r| {
            let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, r);
            unary_case(r, x, |g, a| g.global_avg_pool(a).unwrap())
        }),
        ("relu", |r| {
            let x = away_from_zero(&[6], 0.05, r);
            unary_case(r, x, |g, a| g.relu(a).unwrap())
        }),
        ("tanh", |r| {
            let x = uniform(&[6], -2.0, 2.0, r);
            unary_case(r, x, |g, a| g.tanh(a).unwrap())
        }),
        ("softplus", |r| {
            let x = uniform(&[6], -3.0, 3.0, r);
            unary_case(r, x, |g, a| g.softplus(a).unwrap())
        }),
        ("exp", |r| {
            let x = uniform(&[6], -2.0, 1.0, r);
            unary_case(r, x, |g, a| g.exp(a).unwrap())
        }),
        ("log", |r| {
            let x = uniform(&[6], 0.2, 3.0, r);
            unary_case(r, x, |g, a| g.log(a).unwrap())
        }),
        ("sqrt", |r| {
            let x = uniform(&[6], 0.2, 3.0, r);
            unary_case(r, x, |g, a| g.sqrt(a).unwrap())
        }),
        ("square", |r| {
            let x = uniform(&[6], -2.0, 2.0, r);
            unary_case(r, x, |g, a| g.square(a).unwrap())
        }),
        ("sum", |r| {
            let x = uniform(&[2, 3], -1.0, 1.0, r);
            unary_case(r, x, |g, a| {
                let s = g.sum(a).unwrap();
                g.square(s).unwrap()
            })
        }),
        ("mean", |r| {
            let x = uniform(&[2, 3], -1.0, 1.0, r);
            unary_case(r, x, |g, a| {
                let s = g.mean(a).unwrap();
                g.square(s).unwrap()
            })
        }),
        ("broadcast", |r| {
            let x = uniform(&[3, 1, 1], -1.0, 1.0, r);
            unary_case(r, x, |g, a| g.broadcast(a, &[2, 3, 2, 2]).unwrap())
        }),
        ("reshape", |r| {
            let x = uniform(&[2, 6], -1.0, 1.0, r);
            unary_case(r, x, |g, a| g.reshape(a, &[3, 4]).unwrap())
        }),
        ("softmax", |r| {
            let x = uniform(&[3, 4], -2.0, 2.0, r);
            unary_case(r, x, |g, a| g.softmax(a).unwrap())
        }),
        ("softmax-cross-entropy", |r| {
            let labels: Vec<f64> = (0..4).map(|_| r.random_range(0..5) as f64).collect();
            let mut g = Graph::new();
            let l = g.input("l", uniform(&[4, 5], -3.0, 3.0, r)).unwrap();
            let y = g.constant(Tensor::vector(labels));
            let ce = g.softmax_cross_entropy(l, y).unwrap();
            let s = project(&mut g, ce, r);
            check(&mut g, s, &[("l", l)])
        }),
        ("gather", |r| {
            let idx: Vec<f64> = (0..4).map(|_| r.random_range(0..3) as f64).collect();
            let mut g = Graph::new();
            let a = g.input("a", uniform(&[4, 3], -1.0, 1.0, r)).unwrap();
            let i = g.constant(Tensor::vector(idx));
            let y = g.gather(a, i).unwrap();
            let s = project(&mut g, y, r);
            check(&mut g, s, &[("a", a)])
        }),
    ]
}

fn conv_case(r: &mut ChaCha8Rng, stride: usize, padding: Padding) -> f64 {
    let mut g = Graph::new();
    let x = g.input("x", uniform(&[2, 2, 5, 5], -1.0, 1.0, r)).unwrap();
    let k = g.input("k", uniform(&[3, 2, 3, 3], -1.0, 1.0, r)).unwrap();
    let y = g.conv2d(x, k, stride, padding).unwrap();
    let s = project(&mut g, y, r);
    check(&mut g, s, &[("x", x), ("k", k)])
}

/// Worst relative error of each primitive over `points` random points.
pub fn primitive_errors(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng(seed.wrapping_add(1000 * i as u64));
            let worst = (0..points).map(|_| case(&mut r)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// A posterior over a flat latent vector from explicit means and stds.
pub fn mog(means: Vec<Vec<f64>>, stds: Vec<Vec<f64>>) -> MoGPosterior {
    let dim = means[0].len();
    let layout = LatentLayout::new(LatentStructure::Out, &[(0, dim)]);
    let log_stds = stds.iter().map(|s| s.iter().map(|v| v.ln()).collect()).collect();
    MoGPosterior::from_parts(layout, means, log_stds).unwrap()
}

pub fn random_mog(r: &mut ChaCha8Rng, dim: usize, k: usize) -> MoGPosterior {
    let means = (0..k).map(|_| (0..dim).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
    let stds = (0..k).map(|_| (0..dim).map(|_| r.random_range(0.2..1.5)).collect()).collect();
    mog(means, stds)
}

/// `ln q(z)` of an equally weighted diagonal mixture, written from the
/// density definition.
pub fn mixture_log_density(means: &[Vec<f64>], stds: &[Vec<f64>], z: &[f64]) -> f64 {
    let logs: Vec<f64> = means
        .iter()
        .zip(stds)
        .map(|(m, s)| {
            z.iter()
                .zip(m)
                .zip(s)
                .map(|((zi, mi), si)| {
                    let u = (zi - mi) / si;
                    -0.5 * u * u - si.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum::<f64>()
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + (logs.iter().map(|l| (l - top).exp()).sum::<f64>() / logs.len() as f64).ln()
}

/// Monte Carlo `-E ln q` with its standard error.
pub fn mc_entropy(means: &[Vec<f64>], stds: &[Vec<f64>], n: usize, r: &mut ChaCha8Rng) -> (f64, f64) {
    let k = means.len();
    let dim = means[0].len();
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut z = vec![0.0; dim];
    for _ in 0..n {
        let c = r.random_range(0..k);
        for i in 0..dim {
            let e: f64 = r.sample(StandardNormal);
            z[i] = means[c][i] + stds[c][i] * e;
        }
        let v = -mixture_log_density(means, stds, &z);
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

pub fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    let u = (x - m) / s;
    (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// Conjugate 1-D model `y_n ~ N(w s, noise²)`, `s ~ N(1, prior_std²)`:
/// a fixed linear network whose single output multiplier is the latent.
pub struct ConjugateToy {
    pub net: Network,
    pub q: MoGPosterior,
    pub prior: LatentPrior,
    pub x: Tensor,
    pub y: Tensor,
    pub weight: f64,
    pub noise_std: f64,
}

impl ConjugateToy {
    pub fn new(seed: u64) -> Self {
        let (n, weight, noise_std, prior_std) = (20, 1.3, 1.0, 0.5);
        let mut r = rng(seed);
        let spec = NetworkSpec::mlp(vec![1], &[], 1, Activation::Identity);
        let params = vec![Some(LayerParams {
            weight: Tensor::new(vec![1, 1], vec![weight]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        })];
        let net = Network::from_params(spec.clone(), params).unwrap();
        let q = MoGPosterior::init(spec.latent_layout(LatentStructure::Out), 1, 0.3, 0.0, &mut r).unwrap();
        let truth = 1.4;
        let y = (0..n)
            .map(|_| weight * truth + noise_std * r.sample::<f64, _>(StandardNormal))
            .collect();
        ConjugateToy {
            net,
            q,
            prior: LatentPrior::new(prior_std).unwrap(),
            x: Tensor::new(vec![n, 1], vec![1.0; n]).unwrap(),
            y: Tensor::new(vec![n, 1], y).unwrap(),
            weight,
            noise_std,
        }
    }

    /// Variance of the exact (untempered) posterior over the latent.
    pub fn exact_variance(&self) -> f64 {
        let n = self.y.len() as f64;
        let s2 = self.prior.std().powi(2);
        1.0 / (1.0 / s2 + n * self.weight.powi(2) / self.noise_std.powi(2))
    }

    /// Fits the posterior alone by stochastic ascent with Polyak averaging;
    /// returns the fitted variance.
    pub fn fit_variance(&self, gamma: f64, seed: u64) -> f64 {
        let n = self.y.rows();
        let mut cfg = GammaElboConfig::new(gamma, n);
        cfg.samples = 64;
        cfg.weight_decay = 0.0;
        cfg.likelihood = Likelihood::Gaussian { noise_std: self.noise_std };
        let mut q = self.q.clone();
        let mut r = rng(seed);
        let (steps, burn) = (6000, 2000);
        let mut avg = 0.0;
        for t in 0..steps {
            let batch = Batch { inputs: &self.x, targets: Targets::Values(&self.y) };
            let (_, grad) = gamma_elbo(&self.net, &q, &self.prior, batch, &cfg, 1.0, &mut r).unwrap();
            q.step(0.01, &grad.posterior);
            if t >= burn {
                avg += q.log_std(0)[0];
            }
        }
        (2.0 * avg / (steps - burn) as f64).exp()
    }
}

/// Largest absolute difference between the γ-ELBO at `γ = 0, β = 1` and
/// the classic ELBO assembled independently, over every term.
pub fn classic_elbo_gap(seed: u64) -> f64 {
    use nodebnn::objective::gamma_elbo_with;
    let mut r = rng(seed);
    let spec = NetworkSpec::mlp(vec![4], &[6], 3, Activation::Tanh);
    let net = Network::init(spec.clone(), &mut r).unwrap();
    let mut q = MoGPosterior::init(spec.latent_layout(LatentStructure::Both), 1, 0.3, 0.05, &mut r).unwrap();
    for m in q.mean_mut(0) {
        *m += r.random_range(-0.3..0.3);
    }
    let prior = LatentPrior::new(0.7).unwrap();
    let (b, n) = (5, 60);
    let x = uniform(&[b, 4], -1.0, 1.0, &mut r);
    let y: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
    let samples: Vec<_> = (0..3).map(|_| q.sample(&mut r)).collect();
    let cfg = GammaElboConfig::new(0.0, n);
    let batch = Batch { inputs: &x, targets: Targets::Classes(&y) };
    let (terms, _) = gamma_elbo_with(&net, &q, &prior, batch, &cfg, 1.0, &samples).unwrap();

    let layout = q.layout();
    let mut ell = 0.0;
    for s in &samples {
        let logits = net.forward_stochastic(layout, &x, s).unwrap();
        for (i, &yi) in y.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ell += row[yi] - lse;
        }
    }
    ell *= n as f64 / b as f64 / samples.len() as f64;
    let sq: f64 = net
        .params()
        .iter()
        .flatten()
        .flat_map(|p| p.weight.data().iter().chain(p.bias.data()))
        .map(|v| v * v)
        .sum();
    let log_prior = -0.5 * n as f64 * cfg.weight_decay * sq;
    let s = prior.std();
    let kl: f64 = q
        .mean(0)
        .iter()
        .zip(q.std(0))
        .map(|(m, sd)| (s / sd).ln() + (sd * sd + (m - 1.0).powi(2)) / (2.0 * s * s) - 0.5)
        .sum();
    let elbo = ell + log_prior - kl;
    [
        (terms.expected_log_likelihood - ell).abs(),
        (terms.log_weight_prior - log_prior).abs(),
        (terms.cross_entropy - terms.entropy - kl).abs(),
        (terms.objective - elbo).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Least-squares slope of `ln ||taylor - exact||` against `ln ε` at the
/// final layer of a tanh MLP, for `g⁰ = ε u`.
pub fn taylor_remainder_slope(seed: u64, epsilons: &[f64]) -> f64 {
    use nodebnn::shift::{exact_shift, taylor_shift};
    let mut r = rng(seed);
    let net = Network::init(NetworkSpec::mlp(vec![6], &[8, 8], 4, Activation::Tanh), &mut r).unwrap();
    let x = uniform(&[3, 6], -1.0, 1.0, &mut r);
    let u = uniform(&[3, 6], -1.0, 1.0, &mut r);
    let depth = net.spec().depth();
    let pts: Vec<(f64, f64)> = epsilons
        .iter()
        .map(|&eps| {
            let g0 = u.map(|v| eps * v);
            let xc = x.zip_map(&g0, |a, b| a + b).unwrap();
            let approx = &taylor_shift(&net, &x, &g0).unwrap()[depth];
            let exact = exact_shift(&net, &x, &xc, depth).unwrap();
            let rem = approx.zip_map(&exact, |a, b| a - b).unwrap().norm();
            (eps.ln(), rem.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Random probability rows, some of them sharpened so confident bins fill.
pub fn random_probs(r: &mut ChaCha8Rng, n: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let temp = r.random_range(0.1..3.0);
        let row: Vec<f64> = (0..classes).map(|_| (r.random_range(-2.0..2.0f64) / temp).exp()).collect();
        let z: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / z));
    }
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    (Tensor::new(vec![n, classes], data).unwrap(), labels)
}

/// ECE by scanning every bin over every sample.
pub fn brute_force_ece(probs: &Tensor, labels: &[usize], bins: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        let (mut count, mut hits, mut conf) = (0usize, 0.0, 0.0);
        for i in 0..n {
            let row = probs.row(i);
            let mut k = 0;
            for c in 1..row.len() {
                if row[c] > row[k] {
                    k = c;
                }
            }
            let p = row[k];
            let last = b == bins - 1;
            if p >= lo && (p < hi || (last && p <= hi)) {
                count += 1;
                conf += p;
                if k == labels[i] {
                    hits += 1.0;
                }
            }
        }
        if count > 0 {
            let m = count as f64;
            total += (m / n as f64) * (hits / m - conf / m).abs();
        }
    }
    total
}

/// IDX files assembled byte by byte from the format description.
pub fn hand_idx(pixels: &[u8], labels: &[u8], h: u32, w: u32) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len() as u32;
    let mut img = vec![0, 0, 0x08, 0x03];
    for d in [n, h, w] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = vec![0, 0, 0x08, 0x01];
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Round-trips a small trained-looking model through a checkpoint file and
/// checks tensors and seeded predictions are bit-identical.
pub fn checkpoint_round_trip(seed: u64, dir: &std::path::Path) -> bool {
    use nodebnn::checkpoint::{Checkpoint, RngState};
    use nodebnn::objective::TrainConfig;
    let mut r = rng(seed);
    let spec = NetworkSpec::parse(vec![1, 6, 6], "conv:3:3:1:same:relu, gap, dense:4").unwrap();
    let net = Network::init(spec.clone(), &mut r).unwrap();
    let q = MoGPosterior::init(spec.latent_layout(LatentStructure::Both), 3, 0.3, 0.05, &mut r).unwrap();
    let model = nodebnn::Model::new(net, q).unwrap();
    let ckpt = Checkpoint {
        model,
        prior: LatentPrior::new(0.3).unwrap(),
        train: TrainConfig::default(),
        objective: GammaElboConfig::new(2.0, 100),
        rng: Some(RngState::capture(&r)),
    };
    let next: u64 = r.clone().random();
    let path = dir.join(format!("ckpt-{seed}.bin"));
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let x = uniform(&[3, 1, 6, 6], 0.0, 1.0, &mut r);
    let a = ckpt.model.predictive_mean(&x, 7, &mut rng(1)).unwrap();
    let b = back.model.predictive_mean(&x, 7, &mut rng(1)).unwrap();
    back == ckpt && a == b && back.rng.unwrap().restore().random::<u64>() == next
}

/// A small γ-ELBO instance with frozen posterior noise, so the objective
/// is a deterministic function of θ and φ.
pub struct ObjectiveProblem {
    net: Network,
    q: MoGPosterior,
    prior: LatentPrior,
    x: Tensor,
    y: Vec<usize>,
    samples: Vec<LatentSample>,
    cfg: GammaElboConfig,
}

impl ObjectiveProblem {
    pub fn new(seed: u64, spec: NetworkSpec, structure: LatentStructure) -> Self {
        let mut r = rng(seed);
        let net = Network::init(spec.clone(), &mut r).unwrap();
        let mut q = MoGPosterior::init(spec.latent_layout(structure), 2, 0.3, 0.05, &mut r).unwrap();
        for k in 0..2 {
            for m in q.mean_mut(k) {
                *m += r.random_range(-0.2..0.2);
            }
        }
        let mut shape = vec![4];
        shape.extend_from_slice(&spec.input_shape);
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let y = (0..4).map(|_| r.random_range(0..spec.classes)).collect();
        let samples = (0..3).map(|_| q.sample(&mut r)).collect();
        let mut cfg = GammaElboConfig::new(1.5, 40);
        cfg.samples = 3;
        cfg.weight_decay = 1e-2;
        ObjectiveProblem { net, q, prior: LatentPrior::new(0.4).unwrap(), x, y, samples, cfg }
    }

    fn objective(&self, net: &Network, q: &MoGPosterior) -> f64 {
        let samples: Vec<_> = self
            .samples
            .iter()
            .map(|s| q.sample_with(s.component, s.noise.clone()))
            .collect();
        let batch = Batch { inputs: &self.x, targets: Targets::Classes(&self.y) };
        gamma_elbo_with(net, q, &self.prior, batch, &self.cfg, 0.8, &samples).unwrap().0.objective
    }

    /// Relative error of the analytic gradient against central differences.
    pub fn check(&self) -> f64 {
        let batch = Batch { inputs: &self.x, targets: Targets::Classes(&self.y) };
        let (_, grad) = gamma_elbo_with(&self.net, &self.q, &self.prior, batch, &self.cfg, 0.8, &self.samples).unwrap();
        let eps = 1e-6;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (l, p) in self.net.params().iter().enumerate() {
            let Some(p) = p else { continue };
            let gp = grad.theta[l].as_ref().unwrap();
            for (which, len) in [(0, p.weight.len()), (1, p.bias.len())] {
                for i in (0..len).step_by(3) {
                    let bump = |d: f64| {
                        let mut n = self.net.clone();
                        let lp = n.params_mut()[l].as_mut().unwrap();
                        let t = if which == 0 { &mut lp.weight } else { &mut lp.bias };
                        t.data_mut()[i] += d;
                        self.objective(&n, &self.q)
                    };
                    numeric.push((bump(eps) - bump(-eps)) / (2.0 * eps));
                    analytic.push(if which == 0 { gp.weight.data()[i] } else { gp.bias.data()[i] });
                }
            }
        }
        for k in 0..self.q.components() {
            for i in 0..self.q.dim() {
                for which in 0..2 {
                    let bump = |d: f64| {
                        let mut q = self.q.clone();
                        if which == 0 { q.mean_mut(k)[i] += d } else { q.log_std_mut(k)[i] += d }
                        self.objective(&self.net, &q)
                    };
                    numeric.push((bump(eps) - bump(-eps)) / (2.0 * eps));
                    analytic.push(if which == 0 { grad.posterior.mean[k][i] } else { grad.posterior.log_std[k][i] });
                }
            }
        }
        relative_error(&analytic, &numeric)
    }
}

/// Worst full-objective gradient error over dense (every structure) and
/// conv problems, one per seed.
pub fn objective_gradient_errors(seeds: std::ops::Range<u64>) -> Vec<f64> {
    let conv = NetworkSpec::parse(vec![2, 5, 5], "conv:3:3:2:same:softplus, gap, dense:3").unwrap();
    let dense = NetworkSpec::mlp(vec![3], &[4], 3, Activation::Tanh);
    let structures = [LatentStructure::In, LatentStructure::Out, LatentStructure::Both];
    seeds
        .map(|seed| {
            let s = structures[seed as usize % 3];
            let spec = if seed % 4 == 3 { conv.clone() } else { dense.clone() };
            ObjectiveProblem::new(seed, spec, s).check()
        })
        .collect()
}
