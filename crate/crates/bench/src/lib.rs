//! Fixtures shared by the benchmarks.

use nodebnn::data::synthetic_digits;
use nodebnn::{Activation, Dataset, LatentStructure, Model, MoGPosterior, Network, NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// The desk-scale digit classifier, freshly initialized.
pub fn digit_model(structure: LatentStructure, components: usize) -> Model {
    let mut r = rng(1);
    let spec = NetworkSpec::mlp(vec![1, 28, 28], &[256, 256], 10, Activation::Relu);
    let net = Network::init(spec.clone(), &mut r).unwrap();
    let q = MoGPosterior::init(spec.latent_layout(structure), components, 0.3, 0.02, &mut r).unwrap();
    Model::new(net, q).unwrap()
}

pub fn digits(n: usize) -> Dataset {
    synthetic_digits(n, 5).unwrap()
}
