//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CDNCKPT1"
//! hdr_len    u64      byte length of the JSON header
//! header     JSON     CheckpointHeader
//! blocks     f32 LE   one block per header.params entry, in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::optim::AdamWConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CDNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<AdamWConfig>,
    pub step: u64,
    /// Free-form model description (configuration, provenance).
    #[serde(default)]
    pub model: serde_json::Value,
}

pub fn write_checkpoint<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    optimizer: Option<AdamWConfig>,
    step: u64,
    model: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
        optimizer,
        step,
        model,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in store.iter() {
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamStore<F>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!("{}: bad magic", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(NnError::Format(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut store = ParamStore::new();
    for entry in &header.params {
        if entry.dtype != "f32" {
            return Err(NnError::Format(format!("{}: dtype {}", entry.name, entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, store))
}
