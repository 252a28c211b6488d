mod common;

use common::{brute_force_ece, random_probs, rng};
use nodebnn::data::{corruption_suite, synthetic_digits, CorruptionKind, CorruptionSpec};
use nodebnn::metrics::{ece, ellipse_coverage, ensemble_predict, nll_and_error, pca_overlap, pca_project};
use nodebnn::{Activation, LatentStructure, Model, MoGPosterior, Network, NetworkSpec, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn hand_computed_nll_and_error() {
    let p = Tensor::matrix(3, 3, vec![0.7, 0.2, 0.1, 0.1, 0.3, 0.6, 0.25, 0.5, 0.25]).unwrap();
    let (nll, err) = nll_and_error(&p, &[0, 1, 1]).unwrap();
    let want = -(0.7f64.ln() + 0.3f64.ln() + 0.5f64.ln()) / 3.0;
    assert!((nll - want).abs() < 1e-15);
    assert_eq!(err, 1.0 / 3.0);
}

#[test]
fn degenerate_predictions() {
    let uniform = Tensor::full(&[4, 10], 0.1);
    let (nll, _) = nll_and_error(&uniform, &[0, 3, 9, 5]).unwrap();
    assert!((nll - 10f64.ln()).abs() < 1e-12);
    let one_hot = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(nll_and_error(&one_hot, &[0, 1]).unwrap(), (0.0, 0.0));
    assert_eq!(ece(&one_hot, &[0, 1], 15).unwrap(), 0.0);
    assert_eq!(ece(&one_hot, &[1, 0], 15).unwrap(), 1.0);
    // ties go to the lowest class
    let tie = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
    assert_eq!(nll_and_error(&tie, &[0]).unwrap().1, 0.0);
}

#[test]
fn off_simplex_rows_are_rejected() {
    let p = Tensor::matrix(1, 2, vec![0.6, 0.6]).unwrap();
    assert!(nll_and_error(&p, &[0]).is_err());
    assert!(ece(&Tensor::full(&[1, 2], 0.5), &[0], 0).is_err());
}

#[test]
fn ece_matches_brute_force_on_random_instances() {
    let mut r = rng(1);
    for _ in 0..100 {
        let classes = r.random_range(2..11);
        let bins = r.random_range(1..21);
        let (p, y) = random_probs(&mut r, 100, classes);
        assert_eq!(ece(&p, &y, bins).unwrap(), brute_force_ece(&p, &y, bins));
    }
}

#[test]
fn identical_ensemble_equals_member() {
    let mut r = rng(2);
    let spec = NetworkSpec::mlp(vec![4], &[6], 3, Activation::Tanh);
    let m = Model::new(
        Network::init(spec.clone(), &mut r).unwrap(),
        MoGPosterior::init(spec.latent_layout(LatentStructure::Out), 2, 0.3, 0.02, &mut r).unwrap(),
    )
    .unwrap();
    let mut collapsed = m.clone();
    collapsed.posterior.set_all_std(1e-300);
    let x = common::uniform(&[5, 4], -1.0, 1.0, &mut r);
    let single = collapsed.predictive_mean(&x, 3, &mut rng(3)).unwrap();
    let ens = ensemble_predict(&vec![collapsed; 5], &x, 3, &mut rng(3)).unwrap();
    assert!(ens.max_abs_diff(&single) < 1e-15);
    let mixed = ensemble_predict(&[m.clone(), m], &x, 4, &mut rng(4)).unwrap();
    for i in 0..5 {
        assert!((mixed.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn gaussian_cloud(m: usize, scales: &[f64], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let d = scales.len();
    let data = (0..m * d)
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut r);
            z * scales[i % d]
        })
        .collect();
    Tensor::new(vec![m, d], data).unwrap()
}

#[test]
fn isotropic_cloud_has_equal_ratios() {
    let pca = pca_project(&gaussian_cloud(10_000, &[1.0, 1.0, 1.0], 5), 3).unwrap();
    for r in &pca.explained_variance_ratio {
        assert!((r - 1.0 / 3.0).abs() < 0.02, "{r}");
    }
}

#[test]
fn collinear_points_have_one_component() {
    let data: Vec<f64> = (0..50).flat_map(|i| [i as f64, 2.0 * i as f64 + 1.0, -0.5 * i as f64]).collect();
    let pca = pca_project(&Tensor::matrix(50, 3, data).unwrap(), 2).unwrap();
    assert!(pca.explained_variance_ratio[0] >= 0.999);
    // largest coordinate of the direction (1, 2, -0.5) is positive
    assert!(pca.components.row(0)[1] > 0.0);
    assert!(pca_project(&Tensor::matrix(50, 3, vec![0.0; 150]).unwrap(), 4).is_err());
}

#[test]
fn full_basis_reconstructs_the_data() {
    let x = gaussian_cloud(200, &[3.0, 1.0, 0.5, 0.1], 6);
    let pca = pca_project(&x, 4).unwrap();
    assert!(pca.transform(&x).unwrap().max_abs_diff(&pca.projections) < 1e-12);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        for j in 0..4 {
            let rec: f64 = pca.mean[j] + (0..4).map(|c| pca.projections.row(i)[c] * pca.components.row(c)[j]).sum::<f64>();
            worst = worst.max((rec - x.row(i)[j]).abs());
        }
    }
    assert!(worst / x.norm() <= 1e-8);
    let ratios = &pca.explained_variance_ratio;
    assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn ellipse_covers_its_own_quantile() {
    let s = gaussian_cloud(2000, &[2.0, 0.5], 7);
    let cov = ellipse_coverage(&s, &s, 0.99).unwrap();
    assert!((cov - 0.99).abs() < 1e-3);
    let far = Tensor::matrix(1, 2, vec![100.0, 100.0]).unwrap();
    assert_eq!(ellipse_coverage(&s, &far, 0.99).unwrap(), 0.0);
}

#[test]
fn pca_overlap_places_identity_corruption_at_the_mean() {
    let mut r = rng(8);
    let spec = NetworkSpec::mlp(vec![1, 28, 28], &[12], 10, Activation::Tanh);
    let m = Model::new(
        Network::init(spec.clone(), &mut r).unwrap(),
        MoGPosterior::init(spec.latent_layout(LatentStructure::Both), 2, 0.3, 0.02, &mut r).unwrap(),
    )
    .unwrap();
    let img = synthetic_digits(1, 9).unwrap().image(0);
    let mut suite = vec![CorruptionSpec::new(CorruptionKind::Brightness, 0, 0).unwrap()];
    suite.extend(corruption_suite(1));
    let o = pca_overlap(&m, &img, 0, 1, &suite, 400, 20, 0.99, 3).unwrap();
    assert_eq!(o.samples.shape(), &[400, 2]);
    assert_eq!(o.corrupted[0].projection, o.expected);
    assert!(o.corrupted[0].inside);
    assert_eq!(o.coverage.len(), 6);
    assert_eq!(o.coverage.iter().map(|c| c.total).sum::<usize>(), 26);
    assert!(o.coverage.iter().all(|c| c.inside <= c.total));
    assert_eq!(o, pca_overlap(&m, &img, 0, 1, &suite, 400, 20, 0.99, 3).unwrap());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        assert!(common::checkpoint_round_trip(seed, dir.path()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ratios_are_a_sub_distribution(seed in any::<u64>(), k in 1usize..4) {
        let pca = pca_project(&gaussian_cloud(30, &[1.0, 0.3, 2.0], seed), k).unwrap();
        prop_assert!(pca.explained_variance_ratio.iter().all(|&r| r >= 0.0));
        prop_assert!(pca.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn metrics_stay_in_range(seed in any::<u64>(), bins in 1usize..30) {
        let (p, y) = random_probs(&mut rng(seed), 40, 5);
        let e = ece(&p, &y, bins).unwrap();
        let (nll, err) = nll_and_error(&p, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&e) && (0.0..=1.0).contains(&err) && nll >= 0.0);
    }
}
