//! Versioned checkpoint container.
//!
//! Layout: `b"APGANCKP"`, format version (`u32` LE), header length (`u64` LE),
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::optim::{Adam, AdamHyper};
use super::{ScheduleState, TrainConfig};
use crate::networks::{NetworkSpec, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"APGANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Serializable generator state of a `ChaCha8Rng`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers do not cover `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let bad = || CheckpointError::Corrupt("malformed random-generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Optimizer hyperparameters, step count and moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub steps: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn capture(opt: &Adam<f32>) -> Self {
        let (m, v) = opt.moments();
        OptimizerState {
            hyper: opt.hyper(),
            steps: opt.steps(),
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }

    pub fn restore(&self) -> Adam<f32> {
        Adam::from_parts(self.hyper, self.steps, self.m.clone(), self.v.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub step: u64,
    pub schedule: ScheduleState,
    pub rng: RngState,
    pub generator: ParamSet<f32>,
    pub discriminator: ParamSet<f32>,
    pub opt_g: OptimizerState,
    pub opt_d: OptimizerState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    hyper: AdamHyper,
    steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: NetworkSpec,
    config: TrainConfig,
    config_hash: String,
    step: u64,
    schedule: ScheduleState,
    rng: RngState,
    opt_g: OptimizerHeader,
    opt_d: OptimizerHeader,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
    blob_sha256: String,
}

const GROUPS: [&str; 6] = ["g", "d", "opt_g.m", "opt_g.v", "opt_d.m", "opt_d.v"];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    fn groups(&self) -> [(&[String], &[Tensor<f32>]); 6] {
        let (gn, dn) = (self.generator.names(), self.discriminator.names());
        [
            (gn, self.generator.tensors()),
            (dn, self.discriminator.tensors()),
            (gn, &self.opt_g.m),
            (gn, &self.opt_g.v),
            (dn, &self.opt_d.m),
            (dn, &self.opt_d.v),
        ]
    }

    /// Serialized bytes; identical state gives identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (group, (names, ts)) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in names.iter().zip(ts) {
                tensors.push(TensorEntry {
                    name: format!("{group}/{name}"),
                    shape: t.shape().to_vec(),
                    offset: blob.len() as u64,
                });
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            spec: self.spec.clone(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step,
            schedule: self.schedule,
            rng: self.rng.clone(),
            opt_g: OptimizerHeader {
                hyper: self.opt_g.hyper,
                steps: self.opt_g.steps,
            },
            opt_d: OptimizerHeader {
                hyper: self.opt_d.hyper,
                steps: self.opt_d.steps,
            },
            tensors,
            blob_bytes: blob.len() as u64,
            blob_sha256: hex(&Sha256::digest(&blob)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(corrupt("truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| CheckpointError::Corrupt(format!("unreadable header: {e}")))?;
        let blob = &body[hlen..];
        if blob.len() as u64 != header.blob_bytes {
            return Err(corrupt("tensor data length does not match header"));
        }
        if hex(&Sha256::digest(blob)) != header.blob_sha256 {
            return Err(corrupt("tensor data checksum mismatch"));
        }
        if header.config.hash() != header.config_hash {
            return Err(corrupt("config hash mismatch"));
        }
        let mut groups: Vec<ParamSet<f32>> = (0..GROUPS.len()).map(|_| ParamSet::default()).collect();
        for e in &header.tensors {
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| corrupt("tensor name without group"))?;
            let gi = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor group '{group}'")))?;
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(n * 4)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} out of bounds", e.name)))?;
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            groups[gi].push(name.to_string(), Tensor::new(e.shape.clone(), data));
        }
        let mut it = groups.into_iter();
        let mut next = || it.next().unwrap();
        let (generator, discriminator) = (next(), next());
        let (gm, gv, dm, dv) = (next(), next(), next(), next());
        for (a, b) in [(&generator, &gm), (&generator, &gv), (&discriminator, &dm), (&discriminator, &dv)] {
            if a.names() != b.names() {
                return Err(corrupt("optimizer moments do not match parameters"));
            }
        }
        Ok(Checkpoint {
            spec: header.spec,
            config: header.config,
            step: header.step,
            schedule: header.schedule,
            rng: header.rng,
            generator,
            discriminator,
            opt_g: OptimizerState {
                hyper: header.opt_g.hyper,
                steps: header.opt_g.steps,
                m: gm.tensors().to_vec(),
                v: gv.tensors().to_vec(),
            },
            opt_d: OptimizerState {
                hyper: header.opt_d.hyper,
                steps: header.opt_d.steps,
                m: dm.tensors().to_vec(),
                v: dv.tensors().to_vec(),
            },
        })
    }

    /// Atomic write: temporary sibling file, then rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
