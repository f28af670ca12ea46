//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DGCKPT\0\0" | version u32 | config length u64 | config JSON
//! count u32 | count x (name length u32 | name | rank u32 | dims u64.. | f64 data..)
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::RunConfig;
use crate::diff::{ParameterStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(cfg: &RunConfig, store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let json = serde_json::to_vec(cfg)?;
    out.write_u64::<LittleEndian>(json.len() as u64)?;
    out.write_all(&json)?;
    out.write_u32::<LittleEndian>(store.len() as u32)?;
    for (name, p) in store.iter() {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(p.value.rank() as u32)?;
        for &d in p.value.shape() {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in p.value.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(RunConfig, ParameterStore)> {
    let bad = |what: &str| Error::Checkpoint(what.to_string());
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    if len > bytes.len() {
        return Err(bad("truncated config"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated config"))?;
    let cfg: RunConfig = serde_json::from_slice(&json)?;
    let count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated parameter table"))?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let trunc = |_| bad("truncated parameter");
        let nlen = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if nlen > bytes.len() {
            return Err(bad("truncated parameter"));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let shape = (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>().map_err(trunc)?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > bytes.len() {
            return Err(bad("truncated parameter"));
        }
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
        store.insert(name, Tensor::new(shape, data)?);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((cfg, store))
}

pub fn save(path: &Path, cfg: &RunConfig, store: &ParameterStore) -> Result<()> {
    fs::write(path, encode(cfg, store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, ParameterStore)> {
    decode(&fs::read(path)?)
}

/// Fails unless `store` has exactly the names and shapes of `reference`.
pub fn check_compatible(store: &ParameterStore, reference: &ParameterStore) -> Result<()> {
    let names: Vec<&str> = store.names().collect();
    let expected: Vec<&str> = reference.names().collect();
    if names != expected {
        return Err(Error::Checkpoint(format!("parameter names differ: {names:?} vs {expected:?}")));
    }
    for name in names {
        let (a, b) = (store.value(name).unwrap(), reference.value(name).unwrap());
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, model expects {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}
