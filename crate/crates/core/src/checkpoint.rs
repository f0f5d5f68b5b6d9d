//! Single-file checkpoint container.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` header length, a JSON
//! header (architecture, config, step, parameter manifest), then for every
//! parameter in manifest order its values, first and second Adam moments as
//! little-endian `f32`, and finally a SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stylestego_nn::{Adam, Module, Tensor};

use crate::config::TrainConfig;
use crate::error::{Result, StegoError};
use crate::model::StegoModel;
use crate::stylizer::{ArchConfig, LossWeights};
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"STYSTEG\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub adam_step: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    config: TrainConfig,
    step: u64,
    params: Vec<ParamEntry>,
}

/// A model with the configuration that produced it and its training step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub model: StegoModel,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        Self { config: cfg.clone(), step: state.step, model: state.model.clone() }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            adam: Adam::new(self.config.lr),
            weights: LossWeights { lambda: self.config.lambda, mu: self.config.mu },
            tolerance: self.config.tolerance,
            step: self.step,
            model: self.model,
        }
    }

    /// Fails unless the stored architecture equals `arch`.
    pub fn ensure_arch(&self, arch: &ArchConfig) -> Result<()> {
        if &self.model.arch != arch {
            return Err(StegoError::Incompatible(format!(
                "checkpoint architecture {:?} differs from the requested {:?}",
                self.model.arch, arch
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            arch: self.model.arch.clone(),
            config: self.config.clone(),
            step: self.step,
            params: params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape().to_vec(),
                    adam_step: p.step,
                    frozen: p.frozen,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &params {
            for t in [&p.value, &p.m, &p.v] {
                for &x in t.data() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: &str| StegoError::Integrity(m.to_string());
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(integrity("file is too short to be a checkpoint"));
        }
        if &bytes[..8] != MAGIC {
            return Err(integrity("missing checkpoint magic bytes"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity("checksum mismatch (file truncated or corrupted)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(StegoError::Incompatible(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| integrity("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])?;
        if header.config.arch != header.arch {
            return Err(integrity("header architecture and config disagree"));
        }

        let mut model = StegoModel::new(header.arch.clone(), header.config.seed)?;
        let mut params = model.params_mut();
        if params.len() != header.params.len() {
            return Err(StegoError::Incompatible(format!(
                "checkpoint holds {} parameters, the architecture defines {}",
                header.params.len(),
                params.len()
            )));
        }
        let mut floats = body[header_end..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let expected: usize = header.params.iter().map(|e| 3 * e.shape.iter().product::<usize>()).sum();
        if (body.len() - header_end) != 4 * expected {
            return Err(integrity("parameter payload size does not match the manifest"));
        }
        for (p, e) in params.iter_mut().zip(&header.params) {
            if p.name != e.name || p.shape() != e.shape.as_slice() {
                return Err(StegoError::Incompatible(format!(
                    "parameter `{}` {:?} in file, model expects `{}` {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.shape()
                )));
            }
            let n = p.value.numel();
            let mut read = || Tensor::new(&e.shape, floats.by_ref().take(n).collect());
            p.value = read()?;
            p.m = read()?;
            p.v = read()?;
            p.step = e.adam_step;
            p.frozen = e.frozen;
        }
        Ok(Self { config: header.config, step: header.step, model })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, ckpt.to_bytes()?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
