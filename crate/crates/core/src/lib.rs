//! Node-based Bayesian neural networks trained by variational inference.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod extraction;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod posterior;
pub mod report;
pub mod shift;
pub mod store;
pub mod tensor;

pub use data::{CorruptionKind, CorruptionSpec, Dataset, NoisySplit};
pub use error::{Error, Result};
pub use objective::{fit, gamma_elbo, beta_at_epoch, ElboTerms, GammaElboConfig, Likelihood, TrainConfig, TrainHistory};
pub use posterior::{LatentLayout, LatentPrior, LatentSample, LatentStructure, MoGPosterior, PosteriorGrad};
pub use model::{Activation, LayerSpec, Model, Network, NetworkSpec};
pub use tensor::Tensor;
