//! Binary checkpoint format.
//!
//! Layout: the magic bytes `LOMITCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, raw little-endian `f32`
//! tensor data in header order, and a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{LomitError, Result};
use crate::networks::{Architecture, ModelBundle};
use crate::training::{self, Adam, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"LOMITCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = MAGIC.len() + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    iteration: u64,
    config: TrainConfig,
    architecture: Architecture,
    attribute_names: Vec<String>,
    /// `(generator, critic)` optimizer step counts when optimizer state is stored.
    adam_steps: Option<(u64, u64)>,
    tensors: Vec<TensorEntry>,
}

/// Generator-side and critic-side optimizer state.
#[derive(Debug)]
pub struct OptimizerState {
    pub generator: Adam,
    pub critic: Adam,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: TrainConfig,
    pub attribute_names: Vec<String>,
    pub model: ModelBundle,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn architecture(&self) -> &Architecture {
        self.model.architecture()
    }
}

fn model_key(name: &str) -> String {
    format!("model/{name}")
}

fn opt_key(side: &str, slot: &str, name: &str) -> String {
    format!("{side}/{slot}/{name}")
}

fn encode(
    iteration: u64,
    config: &TrainConfig,
    attribute_names: &[String],
    model: &ModelBundle,
    optimizers: Option<(&Adam, &Adam)>,
) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor)> = model
        .named_variables()
        .into_iter()
        .map(|(n, t)| (model_key(&n), t))
        .collect();
    if let Some((g, d)) = optimizers {
        for (side, opt) in [("opt_g", g), ("opt_d", d)] {
            for (name, m, v) in opt.moments() {
                tensors.push((opt_key(side, "m", name), m.shallow_clone()));
                tensors.push((opt_key(side, "v", name), v.shallow_clone()));
            }
        }
    }
    let header = Header {
        iteration,
        config: config.clone(),
        architecture: model.architecture().clone(),
        attribute_names: attribute_names.to_vec(),
        adam_steps: optimizers.map(|(g, d)| (g.step, d.step)),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.size(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)
        .map_err(|e| LomitError::Config(format!("cannot serialize checkpoint header: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        let values = Vec::<f32>::try_from(t.detach().to_kind(Kind::Float).contiguous().flatten(0, -1))?;
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LomitError::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("lomit.tmp");
    fs::write(&tmp, bytes).map_err(|e| LomitError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| LomitError::io(format!("renaming to {}", path.display()), e))
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    encode(
        ckpt.iteration,
        &ckpt.config,
        &ckpt.attribute_names,
        &ckpt.model,
        ckpt.optimizer.as_ref().map(|o| (&o.generator, &o.critic)),
    )
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ckpt)?)
}

pub(crate) fn save_training_state(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(
        trainer.iteration,
        &trainer.config,
        trainer.attribute_names(),
        &trainer.model,
        Some((&trainer.opt_g, &trainer.opt_d)),
    )?;
    write_atomic(path, &bytes)
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(LomitError::Corrupt(msg.into()))
}

/// Parses and verifies checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return corrupt("not a checkpoint file (bad magic or truncated)");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(LomitError::IncompatibleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return corrupt("digest mismatch (file truncated or modified)");
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|e| *e <= body.len())
        .ok_or_else(|| LomitError::Corrupt("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])
        .map_err(|e| LomitError::Corrupt(format!("unreadable header: {e}")))?;

    let mut data = &body[header_end..];
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        if entry.shape.iter().any(|d| *d < 0) {
            return corrupt(format!("tensor {} has a negative dimension", entry.name));
        }
        let numel: usize = entry.shape.iter().map(|d| *d as usize).product();
        let len = numel * 4;
        if data.len() < len {
            return corrupt(format!("tensor {} is truncated", entry.name));
        }
        let values: Vec<f32> = data[..len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data = &data[len..];
        tensors.insert(entry.name.clone(), Tensor::from_slice(&values).reshape(&entry.shape));
    }
    if !data.is_empty() {
        return corrupt(format!("{} trailing bytes after tensor data", data.len()));
    }
    let take = |tensors: &mut BTreeMap<String, Tensor>, key: String| {
        tensors
            .remove(&key)
            .ok_or_else(|| LomitError::Corrupt(format!("missing tensor {key}")))
    };

    let model = ModelBundle::uninitialized(header.architecture.clone())?;
    tch::no_grad(|| -> Result<()> {
        for (name, var) in model.named_variables() {
            let src = take(&mut tensors, model_key(&name))?;
            if src.size() != var.size() {
                return corrupt(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.size(),
                    var.size()
                ));
            }
            var.shallow_clone().copy_(&src);
        }
        Ok(())
    })?;
    let optimizer = match header.adam_steps {
        Some((g_step, d_step)) => {
            let mut generator = training::generator_optimizer(&model, &header.config);
            let mut critic = training::critic_optimizer(&model, &header.config);
            generator.load_moments(g_step, |slot, name| take(&mut tensors, opt_key("opt_g", slot, name)))?;
            critic.load_moments(d_step, |slot, name| take(&mut tensors, opt_key("opt_d", slot, name)))?;
            Some(OptimizerState { generator, critic })
        }
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return corrupt(format!("unexpected tensor {extra}"));
    }
    Ok(Checkpoint {
        iteration: header.iteration,
        config: header.config,
        attribute_names: header.attribute_names,
        model,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).map_err(|e| LomitError::io(format!("reading checkpoint {}", path.display()), e))?;
    from_bytes(&bytes)
}
