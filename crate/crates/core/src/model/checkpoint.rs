//! Checkpoint container: `PMNETCKP`, a little-endian u32 version, a u64
//! header length, a JSON header (config, training metadata, tensor table),
//! then raw little-endian f32 data in table order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Pmnet, PmnetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PMNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training state stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub val_mse: Option<f64>,
    /// Free-form origin, e.g. the dataset the weights were trained on.
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: PmnetConfig,
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

pub fn save_checkpoint(model: &Pmnet<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::with_capacity(model.num_params() * 4);
    for (name, p) in model.named_params() {
        tensors.push(Entry {
            name,
            buffer: false,
            shape: p.shape.clone(),
        });
        data.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
    }
    for (name, b) in model.named_buffers() {
        tensors.push(Entry {
            name,
            buffer: true,
            shape: vec![b.len()],
        });
        data.extend(b.iter().flat_map(|v| v.to_le_bytes()));
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        meta: meta.clone(),
        tensors,
    })?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(io)?;
    f.write_all(&header).map_err(io)?;
    f.write_all(&data).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(Pmnet<f32>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut model = Pmnet::<f32>::new(&header.config)?;
    let mut data = &bytes[20 + hlen..];

    let mut take = |entry: &Entry, expected: &[usize]| -> Result<Vec<f32>> {
        if entry.shape != expected {
            return Err(Error::Incompatible(format!(
                "tensor {} has shape {:?}, the configured model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let len: usize = expected.iter().product::<usize>() * 4;
        if data.len() < len {
            return Err(Error::format(path, "truncated tensor data"));
        }
        let (head, rest) = data.split_at(len);
        data = rest;
        Ok(head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };

    let (params, buffers): (Vec<&Entry>, Vec<&Entry>) =
        header.tensors.iter().partition(|e| !e.buffer);
    let mut named = model.named_params_mut();
    if named.len() != params.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} parameters, the model has {}",
            params.len(),
            named.len()
        )));
    }
    for ((name, p), entry) in named.iter_mut().zip(&params) {
        if *name != entry.name {
            return Err(Error::Incompatible(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        p.value = take(entry, &p.shape.clone())?;
    }
    drop(named);
    let mut named = model.named_buffers_mut();
    if named.len() != buffers.len() {
        return Err(Error::Incompatible("buffer count mismatch".into()));
    }
    for ((name, b), entry) in named.iter_mut().zip(&buffers) {
        if *name != entry.name {
            return Err(Error::Incompatible(format!(
                "expected buffer {name}, found {}",
                entry.name
            )));
        }
        **b = take(entry, &[b.len()])?;
    }
    drop(named);
    if !data.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok((model, header.meta))
}
