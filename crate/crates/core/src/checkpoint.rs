//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "SYMAECKP"
//! version        u32      FORMAT_VERSION
//! meta_len       u32      byte length of the metadata string
//! meta           UTF-8    free-form metadata (JSON in practice)
//! param_count    u32
//! param_count times:
//!   name_len     u32
//!   name         UTF-8
//!   ndim         u32
//!   dims         u64 * ndim
//!   data         f64 * prod(dims)   (IEEE-754 bits, little-endian)
//! ```
//!
//! Values are stored as raw bits, so a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SYMAECKP";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint(mut w: impl Write, meta: &str, store: &ParamStore) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

/// Reads a checkpoint, returning its metadata string and parameters.
pub fn read_checkpoint(mut r: impl Read) -> Result<(String, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        if store.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        store.add(name, Tensor::new(shape, data));
    }
    Ok((meta, store))
}

pub fn save(path: &Path, meta: &str, store: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), meta, store).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
