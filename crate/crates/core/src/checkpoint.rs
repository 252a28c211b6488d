//! Binary checkpoints: magic, version, JSON header, raw little-endian f64.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerParams, Model, Network, NetworkSpec};
use crate::objective::{GammaElboConfig, TrainConfig};
use crate::posterior::{LatentPrior, LatentStructure, MoGPosterior};
use crate::store;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NBNNCKPT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Stored as a decimal string; JSON numbers cannot hold a u128.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub prior: LatentPrior,
    pub train: TrainConfig,
    pub objective: GammaElboConfig,
    pub rng: Option<RngState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    structure: LatentStructure,
    components: usize,
    prior_std: f64,
    train: TrainConfig,
    objective: GammaElboConfig,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let q = &self.model.posterior;
        let mut tensors = Vec::new();
        let mut payload: Vec<&[f64]> = Vec::new();
        for (i, p) in self.model.network.params().iter().enumerate() {
            if let Some(p) = p {
                tensors.push(TensorEntry { name: format!("weight.{i}"), shape: p.weight.shape().to_vec() });
                payload.push(p.weight.data());
                tensors.push(TensorEntry { name: format!("bias.{i}"), shape: p.bias.shape().to_vec() });
                payload.push(p.bias.data());
            }
        }
        for k in 0..q.components() {
            tensors.push(TensorEntry { name: format!("posterior.mean.{k}"), shape: vec![q.dim()] });
            payload.push(q.mean(k));
        }
        for k in 0..q.components() {
            tensors.push(TensorEntry { name: format!("posterior.log_std.{k}"), shape: vec![q.dim()] });
            payload.push(q.log_std(k));
        }
        let header = Header {
            spec: self.model.network.spec().clone(),
            structure: q.layout().structure(),
            components: q.components(),
            prior_std: self.prior.std(),
            train: self.train.clone(),
            objective: self.objective.clone(),
            rng: self.rng,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u64::<LittleEndian>(json.len() as u64)?;
        out.write_all(&json)?;
        for block in payload {
            store::encode(block, &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| Error::format("checkpoint truncated"))?;
        if &magic != MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| Error::format("checkpoint truncated"))?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let len = cur.read_u64::<LittleEndian>().map_err(|_| Error::format("checkpoint truncated"))? as usize;
        let start = cur.position() as usize;
        let json = bytes
            .get(start..start.saturating_add(len))
            .ok_or_else(|| Error::format("checkpoint header truncated"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let mut rest = &bytes[start + len..];
        let mut take = |entry: &TensorEntry| -> Result<Tensor> {
            let n: usize = entry.shape.iter().product();
            if rest.len() < n * 8 {
                return Err(Error::format(format!("checkpoint payload truncated at {}", entry.name)));
            }
            let (head, tail) = rest.split_at(n * 8);
            rest = tail;
            Tensor::new(entry.shape.clone(), store::decode(head)?)
        };

        let mut entries = header.tensors.iter();
        let mut next = |expect: &str| -> Result<Tensor> {
            let e = entries.next().ok_or_else(|| Error::format(format!("missing tensor {expect}")))?;
            if e.name != expect {
                return Err(Error::format(format!("expected tensor {expect}, found {}", e.name)));
            }
            take(e)
        };
        let mut params = Vec::with_capacity(header.spec.layers.len());
        for (i, l) in header.spec.layers.iter().enumerate() {
            params.push(if l.is_parametric() {
                Some(LayerParams {
                    weight: next(&format!("weight.{i}"))?,
                    bias: next(&format!("bias.{i}"))?,
                })
            } else {
                None
            });
        }
        let network = Network::from_params(header.spec.clone(), params)?;
        let mut means = Vec::with_capacity(header.components);
        for k in 0..header.components {
            means.push(next(&format!("posterior.mean.{k}"))?.into_data());
        }
        let mut log_stds = Vec::with_capacity(header.components);
        for k in 0..header.components {
            log_stds.push(next(&format!("posterior.log_std.{k}"))?.into_data());
        }
        if entries.next().is_some() || !rest.is_empty() {
            return Err(Error::format("trailing data in checkpoint"));
        }
        let layout = header.spec.latent_layout(header.structure);
        let posterior = MoGPosterior::from_parts(layout, means, log_stds)?;
        Ok(Checkpoint {
            model: Model::new(network, posterior)?,
            prior: LatentPrior::new(header.prior_std)?,
            train: header.train,
            objective: header.objective,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
