//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx_dir, synthetic_digits, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::NetworkSpec;
use crate::objective::{GammaElboConfig, TrainConfig};
use crate::posterior::{LatentPrior, LatentStructure};

/// Where training and test images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Rendered digits, generated on the fly.
    Synthetic,
    /// Directory with IDX files named like the classic digit set.
    Idx(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub train_size: usize,
    pub test_size: usize,
    /// Seed for rendering synthetic digits; test images use `data_seed + 1`.
    pub data_seed: u64,
    pub layers: String,
    pub structure: LatentStructure,
    pub components: usize,
    pub prior_std: f64,
    pub init_std: f64,
    pub init_std_scale: f64,
    pub gamma: f64,
    pub train_samples: usize,
    pub weight_decay: f64,
    pub eval_samples: usize,
    pub corruption_seed: u64,
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic,
            train_size: 10_000,
            test_size: 1_000,
            data_seed: 100,
            layers: "dense:256:relu, dense:256:relu, dense:10".to_string(),
            structure: LatentStructure::Out,
            components: 4,
            prior_std: 0.3,
            init_std: 0.3,
            init_std_scale: 0.02,
            gamma: 0.0,
            train_samples: 4,
            weight_decay: 5e-4,
            eval_samples: 30,
            corruption_seed: 7,
            checkpoint_every: 0,
            train: TrainConfig {
                lr_phi: 5.0,
                ..TrainConfig::default()
            },
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value `{raw}` for `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, v)) = body.split_once('=') else {
                return Err(Error::Config(format!("line {line}: expected `key = value`")));
            };
            let (key, v) = (key.trim(), v.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
            }
            cfg.set(key, v, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key; used by the parser and for command-line overrides.
    pub fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data" => {
                self.data = if v == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Idx(PathBuf::from(v))
                }
            }
            "train_size" => self.train_size = value(key, v, line)?,
            "test_size" => self.test_size = value(key, v, line)?,
            "data_seed" => self.data_seed = value(key, v, line)?,
            "layers" => self.layers = v.to_string(),
            "structure" => self.structure = value(key, v, line)?,
            "components" => self.components = value(key, v, line)?,
            "prior_std" => self.prior_std = value(key, v, line)?,
            "init_std" => self.init_std = value(key, v, line)?,
            "init_std_scale" => self.init_std_scale = value(key, v, line)?,
            "gamma" => self.gamma = value(key, v, line)?,
            "train_samples" => self.train_samples = value(key, v, line)?,
            "weight_decay" => self.weight_decay = value(key, v, line)?,
            "eval_samples" => self.eval_samples = value(key, v, line)?,
            "corruption_seed" => self.corruption_seed = value(key, v, line)?,
            "checkpoint_every" => self.checkpoint_every = value(key, v, line)?,
            "epochs" => t.epochs = value(key, v, line)?,
            "batch_size" => t.batch_size = value(key, v, line)?,
            "lr_theta" => t.lr_theta = value(key, v, line)?,
            "lr_phi" => t.lr_phi = value(key, v, line)?,
            "momentum" => t.momentum = value(key, v, line)?,
            "anneal_fraction" => t.anneal_fraction = value(key, v, line)?,
            "lr_decay_start" => t.lr_decay_start = value(key, v, line)?,
            "lr_decay_end" => t.lr_decay_end = value(key, v, line)?,
            "lr_decay_factor" => t.lr_decay_factor = value(key, v, line)?,
            "seed" => t.seed = value(key, v, line)?,
            "validation_samples" => t.validation_samples = value(key, v, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train_size and test_size must be positive");
        }
        if self.components == 0 || self.train_samples == 0 || self.eval_samples == 0 {
            return bad("components, train_samples and eval_samples must be positive");
        }
        if !(self.prior_std > 0.0 && self.init_std > 0.0 && self.init_std_scale >= 0.0) {
            return bad("prior_std and init_std must be positive");
        }
        if !(self.gamma >= 0.0 && self.weight_decay >= 0.0) {
            return bad("gamma and weight_decay must be non-negative");
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        NetworkSpec::parse(vec![1, 28, 28], &self.layers)?;
        Ok(())
    }

    pub fn prior(&self) -> Result<LatentPrior> {
        LatentPrior::new(self.prior_std)
    }

    pub fn network_spec(&self, input_shape: Vec<usize>) -> Result<NetworkSpec> {
        NetworkSpec::parse(input_shape, &self.layers)
    }

    pub fn objective(&self, dataset_size: usize) -> GammaElboConfig {
        GammaElboConfig {
            samples: self.train_samples,
            weight_decay: self.weight_decay,
            ..GammaElboConfig::new(self.gamma, dataset_size)
        }
    }

    /// Training and test sets, truncated to the configured sizes.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic => Ok((
                synthetic_digits(self.train_size, self.data_seed)?,
                synthetic_digits(self.test_size, self.data_seed + 1)?,
            )),
            DataSource::Idx(dir) => {
                let train = load_idx_dir(dir, Split::Train)?;
                let test = load_idx_dir(dir, Split::Test)?;
                Ok((
                    train.head(self.train_size.min(train.len())),
                    test.head(self.test_size.min(test.len())),
                ))
            }
        }
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let data = match &self.data {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Idx(p) => p.display().to_string(),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("data", data),
            ("train_size", self.train_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("layers", self.layers.clone()),
            ("structure", self.structure.to_string()),
            ("components", self.components.to_string()),
            ("prior_std", self.prior_std.to_string()),
            ("init_std", self.init_std.to_string()),
            ("init_std_scale", self.init_std_scale.to_string()),
            ("gamma", self.gamma.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("corruption_seed", self.corruption_seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr_theta", t.lr_theta.to_string()),
            ("lr_phi", t.lr_phi.to_string()),
            ("momentum", t.momentum.to_string()),
            ("anneal_fraction", t.anneal_fraction.to_string()),
            ("lr_decay_start", t.lr_decay_start.to_string()),
            ("lr_decay_end", t.lr_decay_end.to_string()),
            ("lr_decay_factor", t.lr_decay_factor.to_string()),
            ("seed", t.seed.to_string()),
            ("validation_samples", t.validation_samples.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
