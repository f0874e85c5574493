//! Self-describing binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  b"PHLOCCKP"
//! version u32      FORMAT_VERSION
//! hlen    u64      byte length of the header
//! header  hlen     UTF-8 JSON (CheckpointHeader)
//! data             f64 LE values of every tensor, in header order, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::text::Vocabulary;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"PHLOCCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub best_epoch: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub train_config: TrainConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub meta: CheckpointMeta,
}

/// A trained model together with everything needed to apply it to new text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.params.named();
        let header = CheckpointHeader {
            train_config: self.train_config.clone(),
            vocabulary: self.vocabulary.tokens().to_vec(),
            tensors: named
                .iter()
                .map(|(name, _, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = named.iter().map(|(_, _, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let mut data = &body[hlen..];

        let train_config = header.train_config;
        train_config.validate()?;
        let vocabulary = Vocabulary::from_tokens(header.vocabulary)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(&train_config.model, vocabulary.len(), &mut rng)?;
        let expected: Vec<TensorEntry> = params
            .named()
            .into_iter()
            .map(|(name, _, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor names or shapes do not match the stored configuration"));
        }
        for (_, t) in params.tensors_mut() {
            let need = t.len() * 8;
            if data.len() < need {
                return Err(bad("truncated tensor data"));
            }
            for (dst, chunk) in t.data_mut().iter_mut().zip(data[..need].chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model: Model {
                config: train_config.model.clone(),
                params,
            },
            train_config,
            vocabulary,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
