//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `LGBCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u32` header length, the UTF-8 JSON header, then
//! every parameter tensor as little-endian `f32` values in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Scalar};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LGBCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Segment id of each class index.
    pub class_ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    class_ids: Vec<u32>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        seed: meta.seed,
        epoch: meta.epoch,
        class_ids: meta.class_ids.clone(),
        tensors: model
            .tensor_names()
            .into_iter()
            .zip(model.tensors())
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + model.param_count() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Input(format!("checkpoint truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rest = &data[..];
    if take(&mut rest, 8, "magic")? != MAGIC {
        return Err(Error::Input(format!("{} is not a model checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Input(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(take(&mut rest, 4, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut rest, hlen, "header")?)?;
    let mut model = Model::<T>::new(header.config, 0)?;
    let names = model.tensor_names();
    if names.len() != header.tensors.len() {
        return Err(Error::Input("checkpoint tensor list does not match its config".into()));
    }
    for ((dst, name), entry) in model.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
        if *name != entry.name || dst.len() != entry.len {
            return Err(Error::Input(format!(
                "checkpoint tensor {} ({}) does not match expected {name} ({})",
                entry.name,
                entry.len,
                dst.len()
            )));
        }
        let raw = take(&mut rest, 4 * entry.len, &entry.name)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = T::from_f64_lossy(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    if !rest.is_empty() {
        return Err(Error::Input(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    if !model.all_finite() {
        return Err(Error::Numeric("checkpoint contains non-finite parameters".into()));
    }
    Ok((
        model,
        CheckpointMeta {
            seed: header.seed,
            epoch: header.epoch,
            class_ids: header.class_ids,
        },
    ))
}
