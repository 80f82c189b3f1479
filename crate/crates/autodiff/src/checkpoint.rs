//! On-disk snapshot of named tensors plus an opaque manifest string.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "3TANKCKP" | u32 version | u64 manifest_len | manifest bytes (UTF-8)
//! u64 n_entries
//! per entry: u64 name_len | name bytes | u64 ndim | ndim x u64 dims | f64 data
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read cycle is
//! bit-exact. The manifest is free-form text owned by the caller (model
//! crates put a TOML document there).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{AdError, Result};

const MAGIC: &[u8; 8] = b"3TANKCKP";
const VERSION: u32 = 1;

/// Sanity caps applied while reading, so a corrupt header cannot ask for an
/// absurd allocation.
const MAX_NAME_LEN: u64 = 4096;
const MAX_NDIM: u64 = 8;
const MAX_NUMEL: u64 = 1 << 32;
const MAX_MANIFEST_LEN: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub entries: Vec<(String, Tensor)>,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    manifest: &str,
    entries: &[(String, Tensor)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.ndim() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| malformed("file too short for header"))?;
    if &magic != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let manifest_len = read_u64_capped(&mut r, MAX_MANIFEST_LEN, "manifest length")?;
    let mut manifest_bytes = vec![0u8; manifest_len as usize];
    r.read_exact(&mut manifest_bytes).map_err(|_| malformed("truncated manifest"))?;
    let manifest = String::from_utf8(manifest_bytes)
        .map_err(|_| malformed("manifest is not valid UTF-8"))?;

    let n_entries = read_u64_capped(&mut r, 1 << 20, "entry count")?;
    let mut entries = Vec::with_capacity(n_entries as usize);
    for _ in 0..n_entries {
        let name_len = read_u64_capped(&mut r, MAX_NAME_LEN, "name length")?;
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes).map_err(|_| malformed("truncated entry name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| malformed("entry name is not valid UTF-8"))?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(malformed(format!("duplicate entry '{name}'")));
        }
        let ndim = read_u64_capped(&mut r, MAX_NDIM, "rank")?;
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = read_u64_capped(&mut r, MAX_NUMEL, "dimension")?;
            numel = numel.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return Err(malformed(format!("entry '{name}' claims {numel} elements")));
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(|_| malformed("truncated tensor data"))?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(malformed(format!("non-finite value in entry '{name}'")));
            }
            data.push(v);
        }
        entries.push((name, Tensor::new(&shape, data)?));
    }
    // Anything left over means the file doesn't match its own header.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(malformed("trailing bytes after last entry"));
    }
    Ok(Checkpoint { manifest, entries })
}

fn malformed(msg: impl Into<String>) -> AdError {
    AdError::MalformedCheckpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| malformed("truncated u32"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64_capped(r: &mut impl Read, cap: u64, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| malformed(format!("truncated {what}")))?;
    let v = u64::from_le_bytes(buf);
    if v > cap {
        return Err(malformed(format!("{what} {v} exceeds cap {cap}")));
    }
    Ok(v)
}
