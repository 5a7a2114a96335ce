//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"MDCKPT01"
//! manifest_len u64       byte length of the manifest
//! manifest     JSON      {"entries":[{"name":..,"shape":[..],"offset":..}, ..]}
//! payload      f32 LE    tensors back to back; `offset` is in bytes from payload start
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Float, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDCKPT01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<CheckpointEntry>,
}

pub fn write_checkpoint<T: Float, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest { entries }).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let io = |e| Error::io("<checkpoint stream>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&manifest).map_err(io)?;
    for (_, t) in store.iter() {
        for &v in t.data() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Reads every entry as `f32` tensors, in file order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let io = |e| Error::io("<checkpoint stream>", e);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload).map_err(io)?;

    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("entry `{}` runs past end of payload", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(store, BufWriter::new(file))
}

/// Overwrites `store` with the tensors in `path`.
///
/// Names and shapes must match exactly; otherwise nothing is modified and the
/// error lists each expected vs found entry.
pub fn load_checkpoint<T: Float>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_checkpoint(BufReader::new(file))?;
    let mut diff = Vec::new();
    for (name, t) in store.iter() {
        match entries.iter().find(|(n, _)| n == name) {
            None => diff.push(format!("  {name}: expected {:?}, found <missing>", t.shape())),
            Some((_, found)) if found.shape() != t.shape() => {
                diff.push(format!("  {name}: expected {:?}, found {:?}", t.shape(), found.shape()))
            }
            _ => {}
        }
    }
    for (name, t) in &entries {
        if store.id(name).is_none() {
            diff.push(format!("  {name}: expected <absent>, found {:?}", t.shape()));
        }
    }
    if !diff.is_empty() {
        return Err(Error::CheckpointMismatch(diff.join("\n")));
    }
    for (name, t) in entries {
        let id = store.id(&name).expect("checked above");
        *store.get_mut(id) = t.cast();
    }
    Ok(())
}
