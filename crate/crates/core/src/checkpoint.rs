//! `NSTR` checkpoint files.
//!
//! Layout: magic `NSTR`, u16 version, u32 header length, JSON header
//! (config, tensor manifest, optimizer hyperparameters, seed state), raw
//! little-endian f64 payload, CRC32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::{AdamConfig, OptimState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSTR";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedState {
    pub master: u64,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimHeader {
    pub t: u64,
    pub hp: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: SeedState,
    pub optim: Option<OptimHeader>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
    pub optim: Option<OptimState>,
    pub seed: SeedState,
}

impl Checkpoint {
    pub fn from_state(config: ModelConfig, state: &TrainState, master: u64) -> Self {
        Self {
            config,
            params: state.params.clone(),
            optim: Some(state.optim.clone()),
            seed: SeedState {
                master,
                epoch: state.epoch,
                step: state.step,
            },
        }
    }

    /// Training state to resume from; a fresh optimizer when none was saved.
    pub fn into_state(self, hp: AdamConfig) -> TrainState {
        let optim = self.optim.unwrap_or_else(|| OptimState::new(&self.params, hp));
        TrainState {
            params: self.params,
            optim,
            epoch: self.seed.epoch,
            step: self.seed.step,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, t: &Tensor| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    let named = ckpt.params.named();
    for (name, t) in &named {
        push(name.clone(), t);
    }
    if let Some(opt) = &ckpt.optim {
        if opt.m.len() != named.len() || opt.v.len() != named.len() {
            return Err(Error::Contract("optimizer moments do not mirror the parameter tree".into()));
        }
        for ((name, _), m) in named.iter().zip(&opt.m) {
            push(format!("adam.m.{name}"), m);
        }
        for ((name, _), v) in named.iter().zip(&opt.v) {
            push(format!("adam.v.{name}"), v);
        }
    }
    let header = CheckpointHeader {
        config: ckpt.config,
        seed: ckpt.seed,
        optim: ckpt.optim.as_ref().map(|o| OptimHeader { t: o.t, hp: o.hp }),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
    let mut buf = Vec::with_capacity(10 + json.len() + payload.len() + 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&payload);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

fn split(buf: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if buf.len() < 14 {
        return Err(Error::Format(format!("checkpoint truncated at {} bytes", buf.len())));
    }
    if &buf[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an NSTR checkpoint".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes")) as usize;
    let body_end = buf.len() - 4;
    if 10 + len > body_end {
        return Err(Error::Format("checkpoint truncated inside the header".into()));
    }
    let stored = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&buf[10..10 + len]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    Ok((header, &buf[10 + len..body_end]))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(split(&fs::read(path)?)?.0)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let (header, payload) = split(&buf)?;
    header.config.validate()?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let tensor = |e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(n).filter(|&x| x <= values.len());
        let end = end.ok_or_else(|| Error::Format(format!("tensor {} exceeds the payload", e.name)))?;
        Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())
    };
    let skeleton = ModelParams::init(&header.config, 0)?;
    let expected = skeleton.named();
    let count = expected.len();
    let wanted = if header.optim.is_some() { 3 * count } else { count };
    if header.tensors.len() != wanted {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, expected {wanted}",
            header.tensors.len()
        )));
    }
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for (i, entry) in header.tensors.iter().enumerate() {
        let (name, like) = &expected[i % count];
        let want_name = match i / count {
            0 => name.clone(),
            1 => format!("adam.m.{name}"),
            _ => format!("adam.v.{name}"),
        };
        if entry.name != want_name || entry.shape != like.shape() {
            return Err(Error::Format(format!(
                "manifest entry {i} is {} {:?}, expected {want_name} {:?}",
                entry.name,
                entry.shape,
                like.shape()
            )));
        }
        loaded.push(tensor(entry)?);
    }
    let params = skeleton.with_flat(&loaded[..count])?;
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    let optim = header.optim.as_ref().map(|o| OptimState {
        m: loaded[count..2 * count].to_vec(),
        v: loaded[2 * count..].to_vec(),
        t: o.t,
        hp: o.hp,
    });
    Ok(Checkpoint {
        config: header.config,
        params,
        optim,
        seed: header.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub version: u16,
    pub config: ModelConfig,
    pub seed: SeedState,
    pub optimizer_step: Option<u64>,
    pub tensors: usize,
    pub parameters: usize,
    pub bytes: u64,
}

/// Header-level description of a checkpoint; verifies the checksum.
pub fn inspect(path: &Path) -> Result<CheckpointSummary> {
    let header = read_header(path)?;
    let parameters = header
        .tensors
        .iter()
        .filter(|t| !t.name.starts_with("adam."))
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    Ok(CheckpointSummary {
        version: CHECKPOINT_VERSION,
        config: header.config,
        seed: header.seed,
        optimizer_step: header.optim.as_ref().map(|o| o.t),
        tensors: header.tensors.len(),
        parameters,
        bytes: fs::metadata(path)?.len(),
    })
}
