//! Checkpoint file: a magic line carrying the format version, one JSON
//! header line, then every parameter as little-endian `f64` values in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_shapes, Model, ModelConfig, ModelError};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "DCTC-CKPT";

/// Position of the training RNG stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (JSON has no 128-bit ints).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    rng: RngState,
    step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub rng: RngState,
    pub step: u64,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config().clone(),
            rng: self.rng,
            step: self.step,
            params: params
                .names()
                .iter()
                .zip(params.values())
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        for t in params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (magic, rest) = split_line(bytes).ok_or_else(|| corrupt("missing magic line"))?;
        let magic = std::str::from_utf8(magic).map_err(|_| corrupt("magic line is not UTF-8"))?;
        let version = magic
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| corrupt(format!("not a checkpoint (magic line `{magic}`)")))?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (header, mut blob) = split_line(rest).ok_or_else(|| corrupt("missing header"))?;
        let header: Header = serde_json::from_slice(header).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: header.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        header.config.validate()?;
        let expected = param_shapes(&header.config);
        let listed: Vec<(String, Vec<usize>)> = header
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if listed != expected {
            return Err(ModelError::ParamShape(
                "header parameter list disagrees with its config".into(),
            ));
        }
        let mut params = ParamSet::new();
        for (name, shape) in expected {
            let n: usize = shape.iter().product();
            if blob.len() < n * 8 {
                return Err(corrupt(format!("truncated while reading `{name}`")));
            }
            let (head, tail) = blob.split_at(n * 8);
            let data = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
            blob = tail;
        }
        if !blob.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", blob.len())));
        }
        Ok(Checkpoint {
            model: Model::from_params(header.config, params)?,
            rng: header.rng,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and insists that the stored architecture equals `config`.
    pub fn load_expecting(path: &Path, config: &ModelConfig) -> Result<Self, ModelError> {
        let ckpt = Self::load(path)?;
        if ckpt.model.config() != config {
            return Err(ModelError::ParamShape(format!(
                "checkpoint {} was trained with a different model config",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}
