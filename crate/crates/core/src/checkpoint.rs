//! Checkpoint files.
//!
//! Layout: magic `PFCK`, `u32` format version, `u32` manifest length, a
//! JSON manifest, then the tensors back to back in the binary tensor
//! format. The manifest maps every tensor name to its shape, dtype, byte
//! offset, and byte length within the tensor section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::frontend::FrontendKind;
use crate::tensor::{Element, Tensor};
use crate::train::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub codec: Codec<f32>,
    pub config: TrainConfig,
    pub frontend: FrontendKind,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    /// Mean loss of the last completed epoch.
    pub running_loss: f64,
    pub optimizer: AdamState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

/// Per-epoch generators are derived from `(seed, epoch)`, so the seed and
/// the epoch counter are the complete RNG state.
#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    train_config: TrainConfig,
    frontend: FrontendKind,
    epoch: usize,
    step: usize,
    running_loss: f64,
    adam_steps: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let params = self.codec.params();
        let mut out: Vec<(String, &Tensor<f32>)> = params.iter().map(|(n, t)| (format!("param/{n}"), *t)).collect();
        for ((name, _), (m, v)) in params.iter().zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            out.push((format!("adam.m/{name}"), m));
            out.push((format!("adam.v/{name}"), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.named_tensors() {
            let bytes = t.encode();
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: f32::DTYPE.name().to_string(),
                offset: body.len(),
                length: bytes.len(),
            });
            body.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            train_config: self.config.clone(),
            frontend: self.frontend.clone(),
            epoch: self.epoch,
            step: self.step,
            running_loss: self.running_loss,
            adam_steps: self.optimizer.t,
            rng: RngState {
                seed: self.config.seed,
                next_epoch: self.epoch,
            },
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format {
            what: "checkpoint manifest",
            reason: e.to_string(),
        })?;
        let mut out = Vec::with_capacity(12 + json.len() + body.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "checkpoint",
            reason,
        };
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing PFCK header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        let body = &bytes[12 + len..];
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            let chunk = body
                .get(entry.offset..entry.offset + entry.length)
                .ok_or_else(|| bad(format!("tensor {} lies outside the file", entry.name)))?;
            let t = Tensor::<f32>::decode(chunk)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(bad(format!("tensor {} shape disagrees with manifest", entry.name)));
            }
            tensors.insert(entry.name, t);
        }
        let mut take = |prefix: &str| -> BTreeMap<String, Tensor<f32>> {
            let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
            keys.into_iter()
                .map(|k| {
                    let t = tensors.remove(&k).expect("key listed");
                    (k[prefix.len()..].to_string(), t)
                })
                .collect()
        };
        let params = take("param/");
        let mut m = take("adam.m/");
        let mut v = take("adam.v/");
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        let codec = Codec::from_params(manifest.train_config.codec.clone(), params)?;
        let ordered = |map: &mut BTreeMap<String, Tensor<f32>>, what: &str| -> Result<Vec<Tensor<f32>>> {
            codec
                .params()
                .iter()
                .map(|(n, _)| map.remove(n).ok_or_else(|| bad(format!("missing {what} for {n}"))))
                .collect()
        };
        let optimizer = AdamState {
            m: ordered(&mut m, "first moment")?,
            v: ordered(&mut v, "second moment")?,
            t: manifest.adam_steps,
        };
        Ok(Checkpoint {
            codec,
            config: manifest.train_config,
            frontend: manifest.frontend,
            epoch: manifest.epoch,
            step: manifest.step,
            running_loss: manifest.running_loss,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
