//! Named-tensor archives and checkpoint directories.
//!
//! Archive layout (`CXA1`): magic, `u32` entry count, then per entry a `u32`
//! name length, the UTF-8 name, a `u64` payload length and a CXT1 tensor.
//! All integers little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Model, ModelConfig};
use super::optim::AdamW;
use super::train::{EpochLog, StepLog, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::localization::HeadBounds;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const ARCHIVE_MAGIC: &[u8; 4] = b"CXA1";
pub const CHECKPOINT_FORMAT: &str = "canonix-checkpoint-1";
pub const MODEL_FILE: &str = "model.cxa";
pub const OPTIMIZER_FILE: &str = "optimizer.cxa";
pub const MANIFEST_FILE: &str = "checkpoint.json";

pub fn encode_archive(store: &ParamStore) -> Vec<u8> {
    let mut out = ARCHIVE_MAGIC.to_vec();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let payload = t.to_cxt1_bytes();
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::format(format!("bad archive magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4);
    let mut store = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("archive entry name is not UTF-8"))?;
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let start = r.position() as usize;
        let payload = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::format(format!("truncated archive entry {name}")))?;
        let t = Tensor::read_cxt1(payload)?;
        r.set_position((start + len) as u64);
        if store.contains(&name) {
            return Err(Error::format(format!("duplicate archive entry {name}")));
        }
        store.insert(name, t);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::format("trailing bytes after archive"));
    }
    Ok(store)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub head_bounds: Option<HeadBounds>,
    pub model_config_hash: String,
    pub params_sha256: String,
    pub train: Option<TrainConfig>,
    pub train_config_hash: Option<String>,
    pub epochs_done: usize,
    pub epoch_log: Vec<EpochLog>,
    pub step_log: Vec<StepLog>,
}

/// A model with, optionally, the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn bare(model: Model) -> Self {
        Self {
            model,
            train: None,
            state: None,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let params = encode_archive(&self.model.params);
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.model.config.clone(),
            head_bounds: self.model.localizer().map(|l| l.bounds),
            model_config_hash: config_hash(&self.model.config)?,
            params_sha256: sha256_hex(&params),
            train: self.train.clone(),
            train_config_hash: self.train.as_ref().map(config_hash).transpose()?,
            epochs_done: self.state.as_ref().map_or(0, |s| s.epochs_done),
            epoch_log: self.state.as_ref().map_or_else(Vec::new, |s| s.epochs.clone()),
            step_log: self.state.as_ref().map_or_else(Vec::new, |s| s.steps.clone()),
        };
        fs::write(dir.join(MODEL_FILE), &params)?;
        match &self.state {
            Some(s) => fs::write(dir.join(OPTIMIZER_FILE), encode_archive(&s.optimizer.to_store()))?,
            None => {
                if dir.join(OPTIMIZER_FILE).exists() {
                    fs::remove_file(dir.join(OPTIMIZER_FILE))?;
                }
            }
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let bytes = fs::read(dir.join(MODEL_FILE))?;
        if sha256_hex(&bytes) != manifest.params_sha256 {
            return Err(Error::format("model archive does not match its manifest hash"));
        }
        let params = decode_archive(&bytes)?;
        let reference = Model::new(manifest.model.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::format(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::format(format!("checkpoint is missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::format("checkpoint has unexpected extra parameters"));
        }
        let model = Model {
            config: manifest.model,
            params,
        };
        let opt_path = dir.join(OPTIMIZER_FILE);
        let state = match (&manifest.train, opt_path.exists()) {
            (Some(train), true) => Some(TrainState {
                epochs_done: manifest.epochs_done,
                optimizer: AdamW::from_store(&decode_archive(&fs::read(opt_path)?)?, train.weight_decay)?,
                steps: manifest.step_log,
                epochs: manifest.epoch_log,
            }),
            _ => None,
        };
        Ok(Self {
            model,
            train: manifest.train,
            state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trips_and_rejects_corruption() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        s.insert("b", Tensor::scalar(7.0));
        let bytes = encode_archive(&s);
        assert_eq!(&bytes[..4], b"CXA1");
        assert_eq!(decode_archive(&bytes).unwrap(), s);
        assert!(decode_archive(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_archive(&extra).is_err());
    }
}
