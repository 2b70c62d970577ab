//! Single-file weight checkpoints.
//!
//! Layout: the 8-byte magic `EMRCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every array listed in the header as consecutive
//! little-endian `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Architecture, Genotype, ModelWeights, NetworkConfig};

pub const MAGIC: &[u8; 8] = b"EMRCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: NetworkConfig,
    /// `None` for a search supernet.
    pub genotype: Option<Genotype>,
    pub seed: u64,
    pub epoch: usize,
    pub arrays: Vec<ArrayInfo>,
}

pub fn encode(model: &ModelWeights, seed: u64, epoch: usize) -> Result<Vec<u8>> {
    let genotype = match model.architecture() {
        Architecture::Fixed(g) => Some(g.clone()),
        Architecture::Search => None,
    };
    let entries = model.store().entries();
    let header = CheckpointHeader {
        config: model.config().clone(),
        genotype,
        seed,
        epoch,
        arrays: entries
            .iter()
            .map(|e| ArrayInfo {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.store().entries().iter().map(|e| e.data.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in entries {
        for &v in &e.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelWeights, CheckpointHeader)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut model = match &header.genotype {
        Some(g) => ModelWeights::new_fixed(&header.config, g, header.seed)?,
        None => ModelWeights::new_search(&header.config, header.seed)?,
    };
    if model.store().len() != header.arrays.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} arrays, architecture has {}",
            header.arrays.len(),
            model.store().len()
        )));
    }
    let mut offset = 16 + header_len;
    for (info, entry) in header.arrays.iter().zip(model.store_mut().entries_mut()) {
        if info.name != entry.name || info.shape != entry.shape {
            return Err(Error::Format(format!(
                "array {} {:?} does not match expected {} {:?}",
                info.name, info.shape, entry.name, entry.shape
            )));
        }
        let len = entry.data.len();
        let raw = bytes
            .get(offset..offset + 4 * len)
            .ok_or_else(|| Error::Format(format!("truncated data for {}", info.name)))?;
        for (d, b) in entry.data.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        offset += 4 * len;
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &ModelWeights, seed: u64, epoch: usize) -> Result<()> {
    let bytes = encode(model, seed, epoch)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelWeights, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
