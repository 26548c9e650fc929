//! Flat named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `b"IBLMCKPT"` |
//! | 8 | 4 | format version, `u32` = 1 |
//! | 12 | 8 | manifest length `m` in bytes, `u64` |
//! | 20 | m | manifest, UTF-8 JSON |
//! | 20 + m | 8·n | tensor data, IEEE-754 `f64` little-endian |
//!
//! The manifest is `{"tensors": [{"name", "shape", "offset", "count"}, ...]}`
//! sorted by name; `offset` and `count` are in `f64` elements relative to the
//! start of the data section, and tensors are stored back to back in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetError, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IBLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

pub fn write_checkpoint<W: Write>(params: &ParamSet, mut w: W) -> Result<(), NetError> {
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                count: t.numel() as u64,
            };
            offset += e.count;
            e
        })
        .collect();
    let manifest =
        serde_json::to_vec(&Manifest { tensors }).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in params.iter() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet, NetError> {
    let bad = |m: String| NetError::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let mlen = u64::from_le_bytes(u64b) as usize;
    let mut manifest = vec![0u8; mlen];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest).map_err(|e| bad(format!("manifest: {e}")))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = ParamSet::new();
    for e in manifest.tensors {
        let (start, count) = (e.offset as usize, e.count as usize);
        let end = start
            .checked_add(count)
            .filter(|&end| end <= values.len())
            .ok_or_else(|| bad(format!("tensor {:?} runs past the data section", e.name)))?;
        let t = Tensor::new(e.shape, values[start..end].to_vec())
            .map_err(|err| bad(format!("tensor {:?}: {err}", e.name)))?;
        params.insert(e.name, t);
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), NetError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<ParamSet, NetError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
