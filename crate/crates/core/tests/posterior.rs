mod common;

use common::{mc_entropy, mog, normal_pdf, random_mog, rng, simpson};
use nodebnn::{LatentLayout, LatentPrior, LatentStructure, MoGPosterior, PosteriorGrad};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn unit_gaussian_entropy_by_quadrature() {
    let q = mog(vec![vec![0.0]], vec![vec![1.0]]);
    let quad = simpson(|x| {
        let p = normal_pdf(x, 0.0, 1.0);
        if p > 0.0 { -p * p.ln() } else { 0.0 }
    }, -14.0, 14.0, 20_000);
    assert!((q.component_entropy(0) - quad).abs() < 1e-9);
    assert!((quad - 1.41894).abs() < 1e-5);
}

#[test]
fn cross_entropy_to_prior_by_quadrature() {
    let q = mog(vec![vec![1.0]], vec![vec![0.3]]);
    let prior = LatentPrior::new(0.3).unwrap();
    let quad = simpson(|x| -normal_pdf(x, 1.0, 0.3) * normal_pdf(x, 1.0, 0.3).ln(), -4.0, 6.0, 20_000);
    assert!((q.cross_entropy_to_prior(&prior) - quad).abs() < 1e-9);
    assert!((quad - 0.2150).abs() < 5e-5);
}

#[test]
fn bhattacharyya_by_quadrature() {
    let q = mog(vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]);
    let quad = simpson(|x| (normal_pdf(x, 0.0, 1.0) * normal_pdf(x, 1.0, 1.0)).sqrt(), -14.0, 15.0, 20_000);
    assert!((q.bhattacharyya_coefficient(0, 1) - quad).abs() < 1e-10);
    assert!((quad - (-0.125f64).exp()).abs() < 1e-10);
    assert!((quad - 0.8825).abs() < 5e-5);
}

#[test]
fn sample_mean_matches_mixture_mean() {
    let mut r = rng(11);
    let q = random_mog(&mut r, 3, 3);
    let n = 100_000;
    let mut sum = [0.0; 3];
    for _ in 0..n {
        let s = q.sample(&mut r);
        for i in 0..3 {
            sum[i] += s.values[i];
        }
    }
    let mean = q.mixture_mean();
    for i in 0..3 {
        let second: f64 = (0..3).map(|k| q.std(k)[i].powi(2) + q.mean(k)[i].powi(2)).sum::<f64>() / 3.0;
        let sd = (second - mean[i] * mean[i]).sqrt();
        let tol = 4.0 * sd / (n as f64 / 3.0).sqrt();
        assert!((sum[i] / n as f64 - mean[i]).abs() < tol, "coordinate {i}");
    }
}

#[test]
fn entropy_bound_below_monte_carlo() {
    let mut r = rng(12);
    for _ in 0..20 {
        let dim = r.random_range(1..=3);
        let k = r.random_range(1..=4);
        let q = random_mog(&mut r, dim, k);
        let stds: Vec<Vec<f64>> = (0..k).map(|c| q.std(c)).collect();
        let (h, se) = mc_entropy(q.means(), &stds, 100_000, &mut r);
        assert!(q.entropy_lower_bound() <= h + 3.0 * se, "{} vs {h} ± {se}", q.entropy_lower_bound());
    }
}

#[test]
fn coincident_components_have_exact_bound() {
    let q = mog(vec![vec![0.3, -1.0]; 2], vec![vec![0.5, 2.0]; 2]);
    let h1 = q.component_entropy(0);
    assert!((q.entropy_lower_bound() - h1).abs() < 1e-12);
    let (h, se) = mc_entropy(q.means(), &[q.std(0), q.std(1)], 200_000, &mut rng(3));
    assert!((h - h1).abs() < 4.0 * se);
}

#[test]
fn single_component_identities() {
    let mut r = rng(13);
    let prior = LatentPrior::new(0.4).unwrap();
    for _ in 0..10 {
        let q = random_mog(&mut r, 4, 1);
        assert!((q.entropy_lower_bound() - q.component_entropy(0)).abs() <= 1e-12);
        assert!((q.bhattacharyya_coefficient(0, 0) - 1.0).abs() <= 1e-12);
        let s = prior.std();
        let kl: f64 = q
            .mean(0)
            .iter()
            .zip(q.std(0))
            .map(|(m, sd)| (s / sd).ln() + (sd * sd + (m - 1.0).powi(2)) / (2.0 * s * s) - 0.5)
            .sum();
        let surrogate = q.cross_entropy_to_prior(&prior) - q.entropy_lower_bound();
        assert!((surrogate - kl).abs() <= 1e-12, "{surrogate} vs {kl}");
    }
}

#[test]
fn initialization_statistics() {
    let layout = LatentLayout::new(LatentStructure::Both, &[(400, 300), (300, 100)]);
    let q = MoGPosterior::init(layout, 2, 0.30, 0.02, &mut rng(14)).unwrap();
    let all: Vec<f64> = (0..2).flat_map(|k| q.std(k)).collect();
    assert!(all.len() >= 1000);
    assert!(all.iter().all(|&s| s > 0.0 && s < 0.4));
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((mean - 0.30).abs() < 0.01);
    assert!(q.means().iter().flatten().all(|&m| m == 1.0));
}

#[test]
fn pathwise_gradient_of_a_smooth_function() {
    let mut r = rng(15);
    let q = random_mog(&mut r, 3, 2);
    let draws: Vec<_> = (0..8).map(|_| q.sample(&mut r)).collect();
    let f = |v: &[f64]| v[0].sin() * v[1] + v[2] * v[2] * 0.5 + (v[1] * v[2]).tanh();
    let df = |v: &[f64]| {
        let t = 1.0 - (v[1] * v[2]).tanh().powi(2);
        [v[0].cos() * v[1], v[0].sin() + t * v[2], v[2] + t * v[1]]
    };
    let value = |q: &MoGPosterior| {
        draws
            .iter()
            .map(|d| f(&q.sample_with(d.component, d.noise.clone()).values))
            .sum::<f64>()
            / draws.len() as f64
    };
    let mut grad = PosteriorGrad::zeros(2, 3);
    for d in &draws {
        q.accumulate_pathwise(d, &df(&d.values), 1.0 / draws.len() as f64, &mut grad);
    }
    let eps = 1e-6;
    for k in 0..2 {
        for i in 0..3 {
            for which in 0..2 {
                let bump = |delta: f64| {
                    let mut p = q.clone();
                    if which == 0 {
                        p.mean_mut(k)[i] += delta;
                    } else {
                        p.log_std_mut(k)[i] += delta;
                    }
                    value(&p)
                };
                let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let analytic = if which == 0 { grad.mean[k][i] } else { grad.log_std[k][i] };
                assert!((analytic - numeric).abs() / numeric.abs().max(1.0) <= 1e-5);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bhattacharyya_is_symmetric_and_bounded(seed in any::<u64>(), dim in 1usize..5) {
        let q = random_mog(&mut rng(seed), dim, 2);
        let (ab, ba) = (q.bhattacharyya_coefficient(0, 1), q.bhattacharyya_coefficient(1, 0));
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert!(ab > 0.0 && ab <= 1.0);
    }

    #[test]
    fn gibbs_inequality(seed in any::<u64>(), s in 0.05f64..2.0) {
        let q = random_mog(&mut rng(seed), 3, 1);
        let prior = LatentPrior::new(s).unwrap();
        prop_assert!(q.cross_entropy_to_prior(&prior) >= q.component_entropy(0) - 1e-12);
    }

    #[test]
    fn doubling_std_adds_dim_ln2(seed in any::<u64>(), dim in 1usize..6) {
        let q = random_mog(&mut rng(seed), dim, 1);
        let mut d = q.clone();
        for r in d.log_std_mut(0) {
            *r += 2f64.ln();
        }
        let gap = d.component_entropy(0) - q.component_entropy(0);
        prop_assert!((gap - dim as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bound_increases_with_any_std(seed in any::<u64>(), k in 1usize..5, coord in 0usize..3) {
        let mut r = rng(seed);
        let q = random_mog(&mut r, 3, k);
        let c = r.random_range(0..k);
        let mut up = q.clone();
        up.log_std_mut(c)[coord] += 1e-4;
        prop_assert!(up.entropy_lower_bound() > q.entropy_lower_bound());
    }
}
