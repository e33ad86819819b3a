//! `MYOTRKW1` weight files: magic, `u32` manifest length, JSON manifest
//! (config and tensor table), `u64` config fingerprint, then every tensor
//! as little-endian `f32` at its manifest offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use myotracker_core::{ModelConfig, Tensor, WeightStore};
use serde::{Deserialize, Serialize};

use super::{FormatError, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MYOTRKW1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_weights(w: &mut impl Write, config: &ModelConfig, store: &WeightStore) -> Result<()> {
    store.check(config)?;
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += t.len();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&WeightManifest { config: config.clone(), tensors })
        .map_err(|e| FormatError::malformed(e.to_string()))?;
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&store.fingerprint().to_le_bytes())?;
    let blob: Vec<u8> = store.tensors().iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect();
    w.write_all(&blob)?;
    Ok(())
}

/// Reads a weight file; the stored fingerprint must match the stored config.
pub fn read_weights(r: &mut impl Read) -> Result<(ModelConfig, WeightStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(FormatError::malformed("not a weight file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let mut manifest = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut manifest)?;
    let manifest: WeightManifest =
        serde_json::from_slice(&manifest).map_err(|e| FormatError::malformed(format!("weight manifest: {e}")))?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let found = u64::from_le_bytes(b8);
    let expected = manifest.config.fingerprint();
    if found != expected {
        return Err(myotracker_core::Error::Fingerprint { expected, found }.into());
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() % 4 != 0 {
        return Err(FormatError::malformed("weight blob is not a whole number of f32 values"));
    }
    let values: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut named = Vec::with_capacity(manifest.tensors.len());
    let mut end = 0;
    for e in &manifest.tensors {
        let len = e.shape.iter().product::<usize>();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| FormatError::malformed(format!("tensor `{}` runs past the end of the blob", e.name)))?;
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data.to_vec())?));
        end = end.max(e.offset + len);
    }
    if end != values.len() {
        return Err(FormatError::malformed(format!("{} trailing values after the last tensor", values.len() - end)));
    }
    let store = WeightStore::from_named(&manifest.config, named)?;
    Ok((manifest.config, store))
}

pub fn save_weights(path: &Path, config: &ModelConfig, store: &WeightStore) -> Result<()> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_weights(&mut w, config, store)?;
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, WeightStore)> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_weights(&mut BufReader::new(file))
}

/// Loads weights that must fit `config`; a different layout is a
/// fingerprint error.
pub fn load_weights_for(path: &Path, config: &ModelConfig) -> Result<WeightStore> {
    let (_, store) = load_weights(path)?;
    store.check(config)?;
    Ok(store)
}
