//! Single-file training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length, payload,
//! `u32` CRC-32 of the payload (all little-endian). The payload is a
//! length-prefixed JSON header followed by raw `f32` blobs in header order.

use std::fs;
use std::path::Path;

use lococontrast_nn::{Adam, ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::dataset::write_atomic;
use crate::encoders::build_models;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LOCOCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    global_step: u64,
    /// Every random draw is keyed by `(seed, epoch, step, slot)`, so the seed
    /// plus the epoch counter is the complete generator state.
    rng: RngState,
    crop_adam_step: u64,
    pyramid_adam_step: u64,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

/// Tensors in storage order: crop weights, pyramid weights, then the Adam
/// moments (m, v) of each.
fn tensors(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
    for set in [&state.crop.params, &state.pyramid.params] {
        out.extend(set.iter().map(|p| (p.name.clone(), &p.value)));
    }
    for (set, opt) in [
        (&state.crop.params, &state.crop_opt),
        (&state.pyramid.params, &state.pyramid_opt),
    ] {
        for (p, t) in set.iter().zip(opt.first_moments()) {
            out.push((format!("adam.m.{}", p.name), t));
        }
        for (p, t) in set.iter().zip(opt.second_moments()) {
            out.push((format!("adam.v.{}", p.name), t));
        }
    }
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let list = tensors(state);
    let header = Header {
        config: state.config.clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        rng: RngState {
            seed: state.config.seed,
            next_epoch: state.epoch,
        },
        crop_adam_step: state.crop_opt.step_count(),
        pyramid_adam_step: state.pyramid_opt.step_count(),
        tensors: list
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut payload =
        Vec::with_capacity(json.len() + 8 + 4 * list.iter().map(|(_, t)| t.len()).sum::<usize>());
    payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&json);
    for (_, t) in &list {
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }

    let mut bytes = Vec::with_capacity(payload.len() + 24);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, &bytes)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checksum(msg.into())
}

/// Loads a checkpoint; nothing is returned unless the whole file verifies.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != 20 + len + 4 {
        return Err(corrupt(format!(
            "{}: expected {} bytes, found {} (truncated?)",
            path.display(),
            20 + len + 4,
            bytes.len()
        )));
    }
    let payload = &bytes[20..20 + len];
    let stored = u32::from_le_bytes(bytes[20 + len..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(corrupt(format!("{}: CRC mismatch", path.display())));
    }

    if payload.len() < 8 {
        return Err(corrupt("payload too short"));
    }
    let hlen = u64::from_le_bytes(payload[..8].try_into().unwrap()) as usize;
    let json = payload
        .get(8..8 + hlen)
        .ok_or_else(|| corrupt("header overruns payload"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::json(path, e))?;
    let mut blob = &payload[8 + hlen..];

    let mut read = |meta: &TensorMeta, want: &[usize]| -> Result<Tensor<f32>> {
        if meta.shape != want {
            return Err(corrupt(format!(
                "{}: shape {:?}, model expects {:?}",
                meta.name, meta.shape, want
            )));
        }
        let n: usize = want.iter().product();
        if blob.len() < 4 * n {
            return Err(corrupt("tensor data overruns payload"));
        }
        let data = blob[..4 * n].chunks_exact(4).map(f32::read_le).collect();
        blob = &blob[4 * n..];
        Ok(Tensor::from_vec(want, data))
    };

    // Rebuild the architecture, then overwrite every tensor from the file.
    let (mut crop, mut pyramid) = build_models::<f32>(&header.config.model, header.config.seed)?;
    let expected = crop.params.len() * 3 + pyramid.params.len() * 3;
    if header.tensors.len() != expected {
        return Err(corrupt(format!(
            "{} tensors stored, model has {expected}",
            header.tensors.len()
        )));
    }
    let mut metas = header.tensors.iter();
    for set in [&mut crop.params, &mut pyramid.params] {
        for p in set.iter_mut() {
            let meta = metas.next().unwrap();
            if meta.name != p.name {
                return Err(corrupt(format!(
                    "tensor {} where {} was expected",
                    meta.name, p.name
                )));
            }
            p.value = read(meta, p.value.shape())?;
        }
    }
    let mut moments = |set: &ParamSet<f32>| -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let m = set
            .iter()
            .map(|p| read(metas.next().unwrap(), p.value.shape()))
            .collect::<Result<_>>()?;
        let v = set
            .iter()
            .map(|p| read(metas.next().unwrap(), p.value.shape()))
            .collect::<Result<_>>()?;
        Ok((m, v))
    };
    let (cm, cv) = moments(&crop.params)?;
    let (pm, pv) = moments(&pyramid.params)?;
    if !blob.is_empty() {
        return Err(corrupt("trailing bytes after tensor data"));
    }

    let lr = header.config.learning_rate;
    Ok(TrainState {
        crop_opt: Adam::from_state(lr, header.crop_adam_step, cm, cv),
        pyramid_opt: Adam::from_state(lr, header.pyramid_adam_step, pm, pv),
        config: header.config,
        epoch: header.epoch,
        global_step: header.global_step,
        crop,
        pyramid,
    })
}
